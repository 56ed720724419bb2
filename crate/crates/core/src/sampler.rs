//! NUTS-within-Gibbs: a multinomial No-U-Turn update of all coefficients,
//! followed by inverse-gamma updates of the smoothing variances and discrete
//! updates of the anisotropy parameters.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{loglik_pointwise, ConditionalPosterior, LogDensity};
use crate::model::{assemble_block_precisions, build_design, BlockPrior, ModelDesign, ModelSpec, ModelState};
use crate::penalty::{quad_form, AnisotropyGrid};
use crate::data::Dataset;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;
pub const MAX_INIT_ATTEMPTS: usize = 100;
pub const INIT_SD: f64 = 0.1;
/// Shrinkage of the estimated variances toward one.
pub const MASS_SHRINKAGE: f64 = 0.05;

fn default_iterations() -> usize {
    2000
}
fn default_burnin() -> usize {
    1000
}
fn default_warmup() -> usize {
    1000
}
fn default_target_accept() -> f64 {
    0.8
}
fn default_max_treedepth() -> usize {
    10
}
fn default_da_gamma() -> f64 {
    0.05
}
fn default_t0() -> f64 {
    10.0
}
fn default_kappa() -> f64 {
    0.75
}
fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}
fn default_chains() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutsConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Leading iterations discarded.
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    /// Leading iterations used for step-size and mass adaptation.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
    #[serde(default = "default_max_treedepth")]
    pub max_treedepth: usize,
    #[serde(default = "default_da_gamma")]
    pub da_gamma: f64,
    #[serde(default = "default_t0")]
    pub da_t0: f64,
    #[serde(default = "default_kappa")]
    pub da_kappa: f64,
    #[serde(default = "default_true")]
    pub init_step_heuristic: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            iterations: default_iterations(),
            burnin: default_burnin(),
            warmup: default_warmup(),
            target_accept: default_target_accept(),
            max_treedepth: default_max_treedepth(),
            da_gamma: default_da_gamma(),
            da_t0: default_t0(),
            da_kappa: default_kappa(),
            init_step_heuristic: true,
            seed: default_seed(),
            chains: default_chains(),
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burnin {
            return Err(Error::config("sampler.iterations", "must exceed burnin"));
        }
        if self.warmup > self.burnin {
            return Err(Error::config("sampler.warmup", "must not exceed burnin"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("sampler.target_accept", "must lie in (0, 1)"));
        }
        if self.max_treedepth == 0 {
            return Err(Error::config("sampler.max_treedepth", "must be positive"));
        }
        if self.chains == 0 {
            return Err(Error::config("sampler.chains", "must be positive"));
        }
        if !(self.da_gamma > 0.0 && self.da_t0 >= 0.0 && self.da_kappa > 0.0 && self.da_kappa <= 1.0) {
            return Err(Error::config("sampler", "invalid dual-averaging constants"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.iterations - self.burnin
    }
}

/// Per-chain generator: the master seed with the chain index as stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub step_size: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub accept_stat: f64,
    pub log_density: f64,
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Diagonal-metric NUTS kernel with a fixed step size.
#[derive(Debug, Clone, PartialEq)]
pub struct Nuts {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub max_depth: usize,
}

impl Nuts {
    pub fn new(dim: usize, step_size: f64, max_depth: usize) -> Nuts {
        Nuts {
            step_size,
            inv_metric: vec![1.0; dim],
            max_depth,
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| m * p * p).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        if !z.logp.is_finite() {
            return f64::INFINITY;
        }
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| m * p).collect()
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                z / m.sqrt()
            })
            .collect()
    }

    fn leapfrog<T: LogDensity>(&self, target: &T, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = target.log_density_and_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Hamiltonian change along `steps` leapfrog steps from `q` with
    /// momentum `p`.
    pub fn energy_error<T: LogDensity>(&self, target: &T, q: &[f64], p: &[f64], steps: usize) -> f64 {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_grad(q, &mut grad);
        let mut z = Point {
            q: q.to_vec(),
            p: p.to_vec(),
            logp,
            grad,
        };
        let h0 = self.hamiltonian(&z);
        for _ in 0..steps {
            self.leapfrog(target, &mut z, self.step_size);
        }
        self.hamiltonian(&z) - h0
    }

    /// Doubles or halves the step size until the one-step acceptance
    /// probability crosses one half.
    pub fn find_reasonable_step_size<T: LogDensity, R: Rng>(&mut self, target: &T, q: &[f64], rng: &mut R) -> Result<()> {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_grad(q, &mut grad);
        if !logp.is_finite() {
            return Err(Error::Initialization("non-finite log posterior at the starting point".into()));
        }
        let start = Point {
            q: q.to_vec(),
            p: vec![0.0; q.len()],
            logp,
            grad,
        };
        let threshold = 0.5f64.ln();
        let one_step = |nuts: &Nuts, rng: &mut R| {
            let mut z = start.clone();
            z.p = nuts.sample_momentum(rng);
            let h0 = nuts.hamiltonian(&z);
            nuts.leapfrog(target, &mut z, nuts.step_size);
            h0 - nuts.hamiltonian(&z)
        };
        let delta = one_step(self, rng);
        let increase = delta > threshold;
        for _ in 0..100 {
            let delta = one_step(self, rng);
            if increase && !(delta > threshold) || !increase && !(delta < threshold) {
                return Ok(());
            }
            self.step_size = if increase { 2.0 * self.step_size } else { 0.5 * self.step_size };
            if self.step_size > 1e7 || self.step_size < 1e-300 {
                return Err(Error::Initialization(format!(
                    "step size heuristic diverged at {}",
                    self.step_size
                )));
            }
        }
        Ok(())
    }

    /// One NUTS transition from `q`; returns the new point, its log density
    /// and the transition statistics.
    pub fn transition<T: LogDensity, R: Rng>(&self, target: &T, q: &[f64], rng: &mut R) -> Result<(Vec<f64>, IterationStats)> {
        let dim = q.len();
        let mut grad = vec![0.0; dim];
        let logp = target.log_density_and_grad(q, &mut grad);
        if !logp.is_finite() {
            return Err(Error::Initialization("non-finite log posterior at the current state".into()));
        }
        let p = self.sample_momentum(rng);
        let z0 = Point {
            q: q.to_vec(),
            p,
            logp,
            grad,
        };
        let h0 = self.hamiltonian(&z0);
        let mut tree = Tree {
            nuts: self,
            target,
            rng,
            h0,
            n_leapfrog: 0,
            sum_metro: 0.0,
            divergent: false,
        };

        let sharp = self.p_sharp(&z0.p);
        let mut p_fwd_fwd = z0.p.clone();
        let mut p_sharp_fwd_fwd = sharp.clone();
        let mut p_fwd_bck = z0.p.clone();
        let mut p_sharp_fwd_bck = sharp.clone();
        let mut p_bck_fwd = z0.p.clone();
        let mut p_sharp_bck_fwd = sharp.clone();
        let mut p_bck_bck = z0.p.clone();
        let mut p_sharp_bck_bck = sharp;
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut z_fwd = z0.clone();
        let mut z_bck = z0.clone();
        let mut z_sample = z0.clone();
        let mut z_propose = z0;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if tree.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let mut z = z_fwd.clone();
                let valid = tree.build(
                    depth,
                    &mut z,
                    &mut z_propose,
                    Ends {
                        p_sharp_beg: &mut p_sharp_fwd_bck,
                        p_sharp_end: &mut p_sharp_fwd_fwd,
                        rho: &mut rho_fwd,
                        p_beg: &mut p_fwd_bck,
                        p_end: &mut p_fwd_fwd,
                    },
                    &mut lsw_subtree,
                    self.step_size,
                );
                z_fwd = z;
                valid
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let mut z = z_bck.clone();
                let valid = tree.build(
                    depth,
                    &mut z,
                    &mut z_propose,
                    Ends {
                        p_sharp_beg: &mut p_sharp_bck_fwd,
                        p_sharp_end: &mut p_sharp_bck_bck,
                        rho: &mut rho_bck,
                        p_beg: &mut p_bck_fwd,
                        p_end: &mut p_bck_bck,
                    },
                    &mut lsw_subtree,
                    -self.step_size,
                );
                z_bck = z;
                valid
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight || tree.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample = z_propose.clone();
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &add(&rho_bck, &p_fwd_bck));
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
            if !persist {
                break;
            }
        }
        let stats = IterationStats {
            step_size: self.step_size,
            tree_depth: depth,
            n_leapfrog: tree.n_leapfrog,
            divergent: tree.divergent,
            accept_stat: if tree.n_leapfrog > 0 {
                tree.sum_metro / tree.n_leapfrog as f64
            } else {
                0.0
            },
            log_density: z_sample.logp,
        };
        Ok((z_sample.q, stats))
    }
}

struct Ends<'a> {
    p_sharp_beg: &'a mut Vec<f64>,
    p_sharp_end: &'a mut Vec<f64>,
    rho: &'a mut Vec<f64>,
    p_beg: &'a mut Vec<f64>,
    p_end: &'a mut Vec<f64>,
}

struct Tree<'a, T, R> {
    nuts: &'a Nuts,
    target: &'a T,
    rng: &'a mut R,
    h0: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<T: LogDensity, R: Rng> Tree<'_, T, R> {
    #[allow(clippy::too_many_arguments)]
    fn build(&mut self, depth: usize, z: &mut Point, z_propose: &mut Point, ends: Ends<'_>, log_sum_weight: &mut f64, eps: f64) -> bool {
        let dim = z.q.len();
        if depth == 0 {
            self.nuts.leapfrog(self.target, z, eps);
            self.n_leapfrog += 1;
            let h = self.nuts.hamiltonian(z);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            *ends.p_sharp_beg = self.nuts.p_sharp(&z.p);
            ends.p_sharp_end.clone_from(ends.p_sharp_beg);
            for (r, p) in ends.rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            ends.p_beg.clone_from(&z.p);
            ends.p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build(
            depth - 1,
            z,
            z_propose,
            Ends {
                p_sharp_beg: &mut *ends.p_sharp_beg,
                p_sharp_end: &mut p_sharp_init_end,
                rho: &mut rho_init,
                p_beg: &mut *ends.p_beg,
                p_end: &mut p_init_end,
            },
            &mut lsw_init,
            eps,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            Ends {
                p_sharp_beg: &mut p_sharp_final_beg,
                p_sharp_end: &mut *ends.p_sharp_end,
                rho: &mut rho_final,
                p_beg: &mut p_final_beg,
                p_end: &mut *ends.p_end,
            },
            &mut lsw_final,
            eps,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || self.rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in ends.rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(ends.p_sharp_beg, ends.p_sharp_end, &rho_subtree);
        persist &= criterion(ends.p_sharp_beg, &p_sharp_final_beg, &add(&rho_init, &p_final_beg));
        persist &= criterion(&p_sharp_init_end, ends.p_sharp_end, &add(&rho_final, &p_init_end));
        persist
    }
}

/// Nesterov dual averaging of the log step size.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAveraging {
    pub target: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    frozen: Option<f64>,
}

impl DualAveraging {
    pub fn new(step_size: f64, config: &NutsConfig) -> DualAveraging {
        DualAveraging {
            target: config.target_accept,
            gamma: config.da_gamma,
            t0: config.da_t0,
            kappa: config.da_kappa,
            mu: (10.0 * step_size).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            frozen: None,
        }
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    /// Step size for the next iteration; a no-op once frozen.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        if let Some(eps) = self.frozen {
            return eps;
        }
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn averaged(&self) -> f64 {
        self.x_bar.exp()
    }

    /// Freezes at the averaged iterate and returns it.
    pub fn finalize(&mut self, current: f64) -> f64 {
        let eps = if self.counter > 0.0 { self.averaged() } else { current };
        self.frozen = Some(eps);
        eps
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }
}

/// Mass-adaptation windows `[start, end)` inside the warm-up: an initial
/// fast interval, doubling slow windows, and a final fast interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSchedule {
    pub windows: Vec<(usize, usize)>,
}

impl WindowSchedule {
    pub const INIT_BUFFER: usize = 75;
    pub const TERM_BUFFER: usize = 50;
    pub const BASE_WINDOW: usize = 50;

    pub fn new(warmup: usize) -> WindowSchedule {
        if warmup < 20 {
            return WindowSchedule { windows: Vec::new() };
        }
        let (init, term, base) = if Self::INIT_BUFFER + Self::TERM_BUFFER + Self::BASE_WINDOW > warmup {
            let init = (0.15 * warmup as f64) as usize;
            let term = (0.1 * warmup as f64) as usize;
            (init, term, warmup - init - term)
        } else {
            (Self::INIT_BUFFER, Self::TERM_BUFFER, Self::BASE_WINDOW)
        };
        let last = warmup - term;
        let mut windows = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < last {
            let mut end = start + size;
            if end + 2 * size > last {
                end = last;
            }
            windows.push((start, end));
            start = end;
            size *= 2;
        }
        WindowSchedule { windows }
    }

    pub fn window_containing(&self, iter: usize) -> Option<(usize, usize)> {
        self.windows.iter().copied().find(|&(s, e)| s <= iter && iter < e)
    }
}

/// Inverse mass from a warm-up window: `0.95 var + 0.05`, keeping the
/// previous value for constant coordinates.
pub fn adapt_mass(window: &[Vec<f64>], previous: &[f64]) -> Vec<f64> {
    let n = window.len();
    if n < 2 {
        return previous.to_vec();
    }
    (0..previous.len())
        .map(|j| {
            let mean = window.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let var = window.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var > 0.0 && var.is_finite() {
                (1.0 - MASS_SHRINKAGE) * var + MASS_SHRINKAGE
            } else {
                previous[j]
            }
        })
        .collect()
}

/// NUTS with warm-up adaptation of the step size and diagonal metric.
#[derive(Debug, Clone)]
pub struct AdaptiveNuts {
    pub nuts: Nuts,
    pub dual: DualAveraging,
    schedule: WindowSchedule,
    window: Vec<Vec<f64>>,
    warmup: usize,
    heuristic: bool,
}

impl AdaptiveNuts {
    pub fn new(dim: usize, config: &NutsConfig) -> AdaptiveNuts {
        AdaptiveNuts {
            nuts: Nuts::new(dim, 1.0, config.max_treedepth),
            dual: DualAveraging::new(1.0, config),
            schedule: WindowSchedule::new(config.warmup),
            window: Vec::new(),
            warmup: config.warmup,
            heuristic: config.init_step_heuristic,
        }
    }

    pub fn initialize<T: LogDensity, R: Rng>(&mut self, target: &T, q: &[f64], rng: &mut R) -> Result<()> {
        if self.heuristic {
            self.nuts.find_reasonable_step_size(target, q, rng)?;
        }
        self.dual.restart(self.nuts.step_size);
        if self.warmup == 0 {
            self.dual.finalize(self.nuts.step_size);
        }
        Ok(())
    }

    /// One transition at iteration `iter`, adapting during warm-up.
    pub fn step<T: LogDensity, R: Rng>(&mut self, target: &T, q: &[f64], iter: usize, rng: &mut R) -> Result<(Vec<f64>, IterationStats)> {
        let (next, stats) = self.nuts.transition(target, q, rng)?;
        if iter < self.warmup {
            self.nuts.step_size = self.dual.update(stats.accept_stat);
            if let Some((_, end)) = self.schedule.window_containing(iter) {
                self.window.push(next.clone());
                if iter + 1 == end {
                    self.nuts.inv_metric = adapt_mass(&self.window, &self.nuts.inv_metric);
                    self.window.clear();
                    if self.heuristic {
                        self.nuts.find_reasonable_step_size(target, &next, rng)?;
                    }
                    self.dual.restart(self.nuts.step_size);
                }
            }
            if iter + 1 == self.warmup {
                self.nuts.step_size = self.dual.finalize(self.nuts.step_size);
            }
        }
        Ok((next, stats))
    }
}

/// Plain NUTS sampling of a fixed density; returns retained draws and the
/// statistics of every iteration.
pub fn sample_density<T: LogDensity>(target: &T, init: &[f64], config: &NutsConfig, chain: usize) -> Result<(Vec<Vec<f64>>, Vec<IterationStats>)> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let mut sampler = AdaptiveNuts::new(init.len(), config);
    sampler.initialize(target, init, &mut rng)?;
    let mut q = init.to_vec();
    let mut draws = Vec::with_capacity(config.retained());
    let mut stats = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let (next, s) = sampler.step(target, &q, iter, &mut rng)?;
        q = next;
        stats.push(s);
        if iter >= config.burnin {
            draws.push(q.clone());
        }
    }
    Ok((draws, stats))
}

/// Multivariate normal log density, used to check the sampler.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    pub mean: Vec<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<GaussianDensity> {
        let precision = covariance
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular covariance".into()))?;
        Ok(GaussianDensity { mean, precision })
    }
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut value = 0.0;
        for i in 0..d.len() {
            let pd: f64 = (0..d.len()).map(|j| self.precision[(i, j)] * d[j]).sum();
            grad[i] = -pd;
            value -= 0.5 * d[i] * pd;
        }
        value
    }
}

/// Shape and rate of the inverse-gamma full conditional of a smoothing
/// variance.
pub fn tau2_conditional(a: f64, b: f64, rank: usize, quadratic_form: f64) -> (f64, f64) {
    (a + rank as f64 / 2.0, b + 0.5 * quadratic_form)
}

/// Draws `tau^2 ~ IG(a + rk/2, b + beta^T K beta / 2)`.
pub fn gibbs_tau2<R: Rng>(beta: &[f64], penalty: &DMatrix<f64>, a: f64, b: f64, rank: usize, rng: &mut R) -> f64 {
    let (shape, rate) = tau2_conditional(a, b, rank, quad_form(penalty, beta));
    draw_inverse_gamma(shape, rate, rng)
}

pub fn draw_inverse_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

/// Unnormalized log weights of the anisotropy grid given the quadratic forms
/// `q1 = beta^T (K1 ⊗ I) beta` and `q2 = beta^T (I ⊗ K2) beta`.
pub fn omega_log_weights(grid: &AnisotropyGrid, q1: f64, q2: f64, tau2: f64) -> Vec<f64> {
    (0..grid.len())
        .map(|k| {
            let w = grid.omega[k];
            0.5 * grid.log_gdet[k] - 0.5 * grid.rank[k] as f64 * tau2.ln() - (w * q1 + (1.0 - w) * q2) / (2.0 * tau2)
                + grid.log_prior[k]
        })
        .collect()
}

/// Categorical draw from unnormalized log weights.
pub fn draw_categorical<R: Rng>(log_weights: &[f64], rng: &mut R) -> usize {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    w.len() - 1
}

/// Grid index drawn from the discrete full conditional of the anisotropy.
pub fn gibbs_omega<R: Rng>(grid: &AnisotropyGrid, q1: f64, q2: f64, tau2: f64, rng: &mut R) -> usize {
    if grid.len() == 1 {
        return 0;
    }
    draw_categorical(&omega_log_weights(grid, q1, q2, tau2), rng)
}

/// Gibbs sweep over all variances, then all anisotropy parameters.
pub fn gibbs_sweep<R: Rng>(md: &ModelDesign, state: &mut ModelState, rng: &mut R) {
    let blocks = &md.model.layout.blocks;
    for b in blocks {
        let beta = &state.beta[b.range()];
        match &b.prior {
            BlockPrior::Flat => {}
            BlockPrior::Scaled {
                penalty,
                rank,
                a,
                b: rate,
                variance,
            } => state.variances[*variance] = gibbs_tau2(beta, penalty, *a, *rate, *rank, rng),
            BlockPrior::Anisotropic {
                first,
                second,
                grid,
                a,
                b: rate,
                variance,
                anisotropy,
            } => {
                let k = state.anisotropy[*anisotropy];
                let w = grid.omega[k];
                let q = w * quad_form(first, beta) + (1.0 - w) * quad_form(second, beta);
                let (shape, scale) = tau2_conditional(*a, *rate, grid.rank[k], q);
                state.variances[*variance] = draw_inverse_gamma(shape, scale, rng);
            }
        }
    }
    for b in blocks {
        if let BlockPrior::Anisotropic {
            first,
            second,
            grid,
            variance,
            anisotropy,
            ..
        } = &b.prior
        {
            let beta = &state.beta[b.range()];
            let (q1, q2) = (quad_form(first, beta), quad_form(second, beta));
            state.anisotropy[*anisotropy] = gibbs_omega(grid, q1, q2, state.variances[*variance], rng);
        }
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub chain: usize,
    pub beta: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Anisotropy values (not grid indices).
    pub omega: Vec<Vec<f64>>,
    /// Statistics of every iteration, warm-up included.
    pub stats: Vec<IterationStats>,
    /// Per-observation log-PMF at each retained draw.
    pub pointwise: Vec<Vec<f64>>,
    pub burnin: usize,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Divergent transitions among retained iterations.
    pub fn divergences(&self) -> usize {
        self.stats.iter().skip(self.burnin).filter(|s| s.divergent).count()
    }

    /// Concatenates chains in order.
    pub fn pool(chains: &[PosteriorDraws]) -> PosteriorDraws {
        let mut out = PosteriorDraws {
            chain: 0,
            beta: Vec::new(),
            variances: Vec::new(),
            omega: Vec::new(),
            stats: Vec::new(),
            pointwise: Vec::new(),
            burnin: 0,
        };
        for c in chains {
            out.beta.extend(c.beta.iter().cloned());
            out.variances.extend(c.variances.iter().cloned());
            out.omega.extend(c.omega.iter().cloned());
            out.stats.extend(c.stats.iter().skip(c.burnin).copied());
            out.pointwise.extend(c.pointwise.iter().cloned());
        }
        out
    }
}

fn initial_state<R: Rng>(md: &ModelDesign, rng: &mut R) -> Result<ModelState> {
    let layout = &md.model.layout;
    let mut state = layout.initial_state();
    let precision = assemble_block_precisions(layout, &state)?;
    let target = ConditionalPosterior {
        model: &md.model,
        design: &md.design,
        precision: &precision,
    };
    let mut grad = vec![0.0; layout.dim];
    for _ in 0..MAX_INIT_ATTEMPTS {
        for b in state.beta.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *b = INIT_SD * z;
        }
        let value = target.log_density_and_grad(&state.beta, &mut grad);
        if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(state);
        }
    }
    Err(Error::Initialization(format!(
        "no finite log posterior after {MAX_INIT_ATTEMPTS} jittered starting points"
    )))
}

/// Runs one chain of the NUTS-within-Gibbs sampler.
pub fn run_chain(md: &ModelDesign, config: &NutsConfig, chain: usize) -> Result<PosteriorDraws> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let layout = &md.model.layout;
    let mut state = initial_state(md, &mut rng)?;
    let mut sampler = AdaptiveNuts::new(layout.dim, config);
    {
        let precision = assemble_block_precisions(layout, &state)?;
        let target = ConditionalPosterior {
            model: &md.model,
            design: &md.design,
            precision: &precision,
        };
        sampler.initialize(&target, &state.beta, &mut rng)?;
    }
    let retained = config.retained();
    let mut draws = PosteriorDraws {
        chain,
        beta: Vec::with_capacity(retained),
        variances: Vec::with_capacity(retained),
        omega: Vec::with_capacity(retained),
        stats: Vec::with_capacity(config.iterations),
        pointwise: Vec::with_capacity(retained),
        burnin: config.burnin,
    };
    for iter in 0..config.iterations {
        let precision = assemble_block_precisions(layout, &state)?;
        let target = ConditionalPosterior {
            model: &md.model,
            design: &md.design,
            precision: &precision,
        };
        let (next, stats) = sampler.step(&target, &state.beta, iter, &mut rng)?;
        state.beta = next;
        draws.stats.push(stats);
        gibbs_sweep(md, &mut state, &mut rng);
        if iter >= config.burnin {
            draws.pointwise.push(loglik_pointwise(&md.model, &md.design, &state.beta));
            draws.beta.push(state.beta.clone());
            draws.variances.push(state.variances.clone());
            draws.omega.push(layout.omega_values(&state));
        }
    }
    Ok(draws)
}

/// Runs `config.chains` chains concurrently; results are in chain order.
pub fn run_chains(md: &ModelDesign, config: &NutsConfig) -> Result<Vec<PosteriorDraws>> {
    config.validate()?;
    (0..config.chains).into_par_iter().map(|c| run_chain(md, config, c)).collect()
}

/// Builds the design from training data and samples.
pub fn fit(spec: &ModelSpec, data: &Dataset, config: &NutsConfig) -> Result<(ModelDesign, Vec<PosteriorDraws>)> {
    let md = build_design(spec, data)?;
    let chains = run_chains(&md, config)?;
    Ok((md, chains))
}
