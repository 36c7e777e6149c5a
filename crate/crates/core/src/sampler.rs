//! Metropolis-within-Gibbs sampler for the hierarchical analog model, plus
//! the posterior-predictive forecaster.
//!
//! One iteration runs five blocks in order: componentwise log-normal MH
//! updates for every coefficient `beta[j][t]`, inverse-transform draws of the
//! neighborhood size `m` and the embedding length `q` over their grids (and
//! of the eigenmap neighbor count in eigenmap mode), then log-normal MH
//! updates for the kernel bandwidth `theta1` and the process variance
//! `sigma2_eta`. All density arithmetic stays in log space; the discrete
//! steps normalize by max-subtraction.
//!
//! Log-scale random-walk proposals carry a change-of-variable Jacobian; the
//! ratios as literally printed omit it, and that variant stays available
//! behind [`JacobianMode::LiteralAppendix`] for comparison.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::analog::{CacheKey, DistanceCache, WeightVector};
use crate::data::{CountField, TimeAlignment};
use crate::error::{Error, Result};
use crate::nmf::Factorization;
use crate::stochastic::{
    clamped_location, inverse_gamma_logpdf, poisson_loglik, tn_logpdf, tn_sample, Hyperparams,
    ModelParams,
};

/// Recompute cached intensities and means from scratch this often, clearing
/// accumulated floating-point drift from incremental updates.
const REFRESH_INTERVAL: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum JacobianMode {
    /// Include the log-scale proposal Jacobian (correct stationary law).
    #[default]
    Corrected,
    /// The ratios exactly as printed, without the Jacobian.
    LiteralAppendix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProcessTerm {
    #[default]
    Enabled,
    /// Drop the truncated-normal process density from every ratio; the
    /// parameter blocks then target their priors (prior-recovery harness).
    Disabled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub jacobian: JacobianMode,
    pub process_term: ProcessTerm,
    /// Randomize the coefficient sweep order each iteration instead of the
    /// default fixed (j outer, t inner) order.
    pub random_sweep: bool,
    /// Draw forecast coefficients with truncated-normal process noise around
    /// the weighted analog combination instead of the point composition.
    pub forecast_noise: bool,
    /// Response indices whose Poisson term is masked out of the likelihood
    /// (held-out periods for hindcasting).
    pub likelihood_mask: Vec<usize>,
    /// Proposal-scale adaptation cadence during burn-in.
    pub adapt_interval: usize,
    /// Acceptance-rate band targeted by the adaptation.
    pub target_accept: (f64, f64),
    /// Initial log-scale proposal standard deviation.
    pub init_step: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 20_000,
            burn_in: 2_000,
            seed: 0,
            jacobian: JacobianMode::default(),
            process_term: ProcessTerm::default(),
            random_sweep: false,
            forecast_noise: false,
            likelihood_mask: Vec::new(),
            adapt_interval: 50,
            target_accept: (0.30, 0.45),
            init_step: 0.5,
        }
    }
}

/// Everything immutable a chain needs.
pub struct ModelContext<'a> {
    pub data: &'a CountField,
    pub factorization: &'a Factorization,
    pub cache: &'a DistanceCache,
    pub hyper: &'a Hyperparams,
    pub align: &'a TimeAlignment,
    pub config: &'a SamplerConfig,
}

impl ModelContext<'_> {
    fn n_periods(&self) -> usize {
        self.data.n_periods()
    }

    fn n_beta(&self) -> usize {
        self.factorization.n_basis()
    }

    fn is_masked(&self, t: usize) -> bool {
        self.config.likelihood_mask.contains(&t)
    }

    fn process_enabled(&self) -> bool {
        self.config.process_term == ProcessTerm::Enabled
    }

    /// Validate the pieces against one another before running.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let t = self.n_periods();
        if self.factorization.b.ncols() != t {
            return Err(Error::Dimension(format!(
                "factorization has {} coefficient columns but data has {t} periods",
                self.factorization.b.ncols()
            )));
        }
        if self.factorization.psi.nrows() != self.data.n_locations() {
            return Err(Error::Dimension("basis rows do not match data locations".into()));
        }
        if self.cache.n_training != t {
            return Err(Error::Dimension(format!(
                "distance cache covers {} training periods, data has {t}",
                self.cache.n_training
            )));
        }
        for (i, &c) in self.cache.candidates.iter().take(t).enumerate() {
            if c != i {
                return Err(Error::Dimension("cache candidates must be 0..T in order".into()));
            }
        }
        if self.hyper.m_max > t - 1 {
            return Err(Error::Config(format!(
                "m_max {} exceeds the {} available analogs",
                self.hyper.m_max,
                t - 1
            )));
        }
        for &t_masked in &self.config.likelihood_mask {
            if t_masked >= t {
                return Err(Error::Config(format!("masked index {t_masked} out of range")));
            }
        }
        Ok(())
    }
}

/// Proposal scales plus acceptance bookkeeping.
#[derive(Debug, Clone)]
pub struct Tuning {
    /// Per-coefficient log-scale proposal standard deviations.
    pub zeta: DMatrix<f64>,
    pub step_theta1: f64,
    pub step_sigma2: f64,
    accept_beta: u64,
    attempt_beta: u64,
    accept_theta1: u64,
    attempt_theta1: u64,
    accept_sigma2: u64,
    attempt_sigma2: u64,
    // Window counters for burn-in adaptation.
    win_accept_beta: DMatrix<f64>,
    win_attempt_beta: DMatrix<f64>,
    win_theta1: (u64, u64),
    win_sigma2: (u64, u64),
}

impl Tuning {
    pub fn new(n_beta: usize, t: usize, init_step: f64) -> Self {
        Tuning {
            zeta: DMatrix::from_element(n_beta, t, init_step),
            step_theta1: init_step,
            step_sigma2: init_step,
            accept_beta: 0,
            attempt_beta: 0,
            accept_theta1: 0,
            attempt_theta1: 0,
            accept_sigma2: 0,
            attempt_sigma2: 0,
            win_accept_beta: DMatrix::zeros(n_beta, t),
            win_attempt_beta: DMatrix::zeros(n_beta, t),
            win_theta1: (0, 0),
            win_sigma2: (0, 0),
        }
    }

    /// Rescale proposals toward the target acceptance band and reset the
    /// adaptation window. Only called during burn-in; scales freeze after.
    fn adapt(&mut self, target: (f64, f64)) {
        let (lo, hi) = target;
        for j in 0..self.zeta.nrows() {
            for t in 0..self.zeta.ncols() {
                let attempts = self.win_attempt_beta[(j, t)];
                if attempts > 0.0 {
                    let rate = self.win_accept_beta[(j, t)] / attempts;
                    let z = &mut self.zeta[(j, t)];
                    if rate < lo {
                        *z = (*z * 0.8).max(1e-3);
                    } else if rate > hi {
                        *z = (*z * 1.25).min(10.0);
                    }
                }
            }
        }
        self.win_accept_beta.fill(0.0);
        self.win_attempt_beta.fill(0.0);
        for (step, win) in [
            (&mut self.step_theta1, &mut self.win_theta1),
            (&mut self.step_sigma2, &mut self.win_sigma2),
        ] {
            if win.1 > 0 {
                let rate = win.0 as f64 / win.1 as f64;
                if rate < lo {
                    *step = (*step * 0.8).max(1e-3);
                } else if rate > hi {
                    *step = (*step * 1.25).min(10.0);
                }
            }
            *win = (0, 0);
        }
    }

    pub fn beta_rate(&self) -> f64 {
        rate(self.accept_beta, self.attempt_beta)
    }

    pub fn theta1_rate(&self) -> f64 {
        rate(self.accept_theta1, self.attempt_theta1)
    }

    pub fn sigma2_rate(&self) -> f64 {
        rate(self.accept_sigma2, self.attempt_sigma2)
    }

    pub fn beta_attempts(&self) -> u64 {
        self.attempt_beta
    }
}

fn rate(accepts: u64, attempts: u64) -> f64 {
    if attempts == 0 {
        0.0
    } else {
        accepts as f64 / attempts as f64
    }
}

/// One MCMC iterate with its derived caches.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Coefficients, `n_beta x T`, strictly positive.
    pub beta: DMatrix<f64>,
    pub params: ModelParams,
    /// Kernel weights per training period under the current parameters.
    pub weights: Vec<WeightVector>,
    /// Analog means `mu[:, t] = B_{-t} omega_t`.
    pub mu: DMatrix<f64>,
    /// Clamped bias-corrected process locations.
    pub loc: DMatrix<f64>,
    /// Cached intensities `Psi beta + offset`.
    pub lambda: DMatrix<f64>,
    /// Per-period Poisson log likelihood (zero for masked periods).
    pub data_loglik: Vec<f64>,
    /// `dependents[t]` lists `(s, omega_s[t])` for every training period `s`
    /// whose analog mean draws on `beta[:, t]`.
    pub dependents: Vec<Vec<(usize, f64)>>,
}

impl ChainState {
    /// Initialize from the factorization's coefficients (floored away from
    /// zero so log-scale proposals are defined) and mid-grid parameters.
    pub fn init(ctx: &ModelContext<'_>) -> Result<ChainState> {
        ctx.validate()?;
        let hyper = ctx.hyper;
        let b = &ctx.factorization.b;
        let positive_mean = {
            let (sum, count) = b.iter().filter(|v| **v > 0.0).fold((0.0, 0u32), |acc, v| {
                (acc.0 + v, acc.1 + 1)
            });
            if count == 0 {
                1.0
            } else {
                sum / count as f64
            }
        };
        let floor = (positive_mean * 1e-8).max(1e-300);
        let beta = b.map(|v| v.max(floor));

        let k_nn = ctx
            .cache
            .keys()
            .next()
            .and_then(|k| k.k_nn)
            .map(|_| middle(&hyper.knn_grid));
        let params = ModelParams {
            m: (hyper.m_min + hyper.m_max) / 2,
            q: (hyper.q_min + hyper.q_max) / 2,
            theta1: hyper.b1 / (hyper.a1 + 1.0),
            sigma2_eta: beta_scale(&beta),
            k_nn,
        };

        let mut state = ChainState {
            beta,
            params,
            weights: Vec::new(),
            mu: DMatrix::zeros(ctx.n_beta(), ctx.n_periods()),
            loc: DMatrix::zeros(ctx.n_beta(), ctx.n_periods()),
            lambda: DMatrix::zeros(ctx.data.n_locations(), ctx.n_periods()),
            data_loglik: vec![0.0; ctx.n_periods()],
            dependents: Vec::new(),
        };
        state.rebuild_weights(ctx)?;
        state.refresh_data_caches(ctx)?;
        Ok(state)
    }

    fn key(&self) -> CacheKey {
        CacheKey { k_nn: self.params.k_nn, q: self.params.q }
    }

    /// Recompute weights, analog means, process locations and dependent
    /// lists for the current parameters.
    pub fn rebuild_weights(&mut self, ctx: &ModelContext<'_>) -> Result<()> {
        let t_len = ctx.n_periods();
        let key = self.key();
        let (weights, mu) =
            weights_and_means(ctx, &self.beta, &key, self.params.m, self.params.theta1)?;
        self.weights = weights;
        self.mu = mu;
        self.loc = locations(&self.mu, self.params.sigma2_eta, ctx.hyper.eps);
        self.dependents = vec![Vec::new(); t_len];
        for (s, w) in self.weights.iter().enumerate() {
            for (l, omega) in w.nonzero() {
                self.dependents[l].push((s, omega));
            }
        }
        Ok(())
    }

    /// Recompute intensities and the per-period data log likelihood.
    pub fn refresh_data_caches(&mut self, ctx: &ModelContext<'_>) -> Result<()> {
        for t in 0..ctx.n_periods() {
            let beta_t = self.beta.column(t).into_owned();
            let lambda_t = ctx.factorization.reconstruct(&beta_t)?;
            self.lambda.set_column(t, &lambda_t);
            self.data_loglik[t] = if ctx.is_masked(t) {
                0.0
            } else {
                let y = ctx.data.period(t);
                let ll = poisson_loglik(&y, lambda_t.as_slice())?;
                if !ll.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite data log likelihood at period {t}"
                    )));
                }
                ll
            };
        }
        Ok(())
    }

    /// Truncated-normal process log density of the whole coefficient field
    /// under the current locations.
    pub fn process_sum(&self) -> f64 {
        let mut total = 0.0;
        for t in 0..self.beta.ncols() {
            for j in 0..self.beta.nrows() {
                total += tn_logpdf(self.beta[(j, t)], self.loc[(j, t)], self.params.sigma2_eta);
            }
        }
        total
    }

    pub fn log_posterior(&self, ctx: &ModelContext<'_>) -> f64 {
        let process = if ctx.process_enabled() { self.process_sum() } else { 0.0 };
        self.data_loglik.iter().sum::<f64>()
            + process
            + crate::stochastic::prior_logpdf(&self.params, ctx.hyper)
    }

    /// Debug-mode consistency check: cached weights and means must equal a
    /// from-scratch recomputation.
    pub fn check_consistency(&self, ctx: &ModelContext<'_>) -> Result<()> {
        let key = self.key();
        let (weights, mu) =
            weights_and_means(ctx, &self.beta, &key, self.params.m, self.params.theta1)?;
        for (t, w) in weights.iter().enumerate() {
            if w != &self.weights[t] {
                return Err(Error::Numerical(format!("stale cached weights at period {t}")));
            }
        }
        let drift = (&mu - &self.mu).norm();
        if drift > 1e-8 * (1.0 + mu.norm()) {
            return Err(Error::Numerical(format!("stale analog means (drift {drift})")));
        }
        Ok(())
    }
}

fn middle(grid: &[usize]) -> usize {
    grid[grid.len() / 2]
}

fn beta_scale(beta: &DMatrix<f64>) -> f64 {
    let n = (beta.nrows() * beta.ncols()) as f64;
    let mean = beta.sum() / n;
    let var = beta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.max(0.01)
}

/// Kernel weights and analog means for every training period under the
/// given `(key, m, theta1)`.
fn weights_and_means(
    ctx: &ModelContext<'_>,
    beta: &DMatrix<f64>,
    key: &CacheKey,
    m: usize,
    theta1: f64,
) -> Result<(Vec<WeightVector>, DMatrix<f64>)> {
    let t_len = ctx.n_periods();
    let n_beta = beta.nrows();
    let mut weights = Vec::with_capacity(t_len);
    let mut mu = DMatrix::zeros(n_beta, t_len);
    for t in 0..t_len {
        let w = ctx.cache.weights(key, t, m, theta1)?;
        for (l, omega) in w.nonzero() {
            for j in 0..n_beta {
                mu[(j, t)] += omega * beta[(j, l)];
            }
        }
        weights.push(w);
    }
    Ok((weights, mu))
}

/// Clamped bias-corrected locations for a matrix of analog means.
fn locations(mu: &DMatrix<f64>, sigma2: f64, eps: f64) -> DMatrix<f64> {
    mu.map(|target| clamped_location(target, sigma2, eps))
}

/// Block 1: componentwise Metropolis-Hastings updates of every `beta[j][t]`
/// with log-normal proposals.
///
/// The ratio combines the period-`t` Poisson term, the truncated-normal
/// terms actually touched by the move (the `(j, t)` density itself plus the
/// row-`j` terms of every period whose analog mean draws on `beta[j][t]`;
/// all other factors in the full product cancel exactly), and the proposal
/// Jacobian in corrected mode.
pub fn step_beta<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    tuning: &mut Tuning,
    rng: &mut R,
) -> Result<()> {
    let n_beta = ctx.n_beta();
    let t_len = ctx.n_periods();
    let sigma2 = state.params.sigma2_eta;
    let eps = ctx.hyper.eps;
    let psi = &ctx.factorization.psi;
    let n_y = ctx.data.n_locations();
    let mut lambda_scratch = vec![0.0; n_y];

    let mut pairs: Vec<(usize, usize)> = (0..n_beta)
        .flat_map(|j| (0..t_len).map(move |t| (j, t)))
        .collect();
    if ctx.config.random_sweep {
        // Fisher-Yates with the chain RNG keeps runs seed-deterministic.
        for i in (1..pairs.len()).rev() {
            let k = rng.random_range(0..=i);
            pairs.swap(i, k);
        }
    }

    for (j, t) in pairs {
        tuning.attempt_beta += 1;
        tuning.win_attempt_beta[(j, t)] += 1.0;

        let current = state.beta[(j, t)];
        let zeta = tuning.zeta[(j, t)];
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let proposed = (current.ln() + zeta * z).exp();
        if proposed == 0.0 || !proposed.is_finite() {
            continue;
        }
        let delta_beta = proposed - current;

        // Data term: only the period-t intensity moves.
        let mut log_ratio = 0.0;
        if !ctx.is_masked(t) {
            let y = ctx.data.period(t);
            for i in 0..n_y {
                lambda_scratch[i] = state.lambda[(i, t)] + psi[(i, j)] * delta_beta;
            }
            let proposed_ll = poisson_loglik(&y, &lambda_scratch)?;
            log_ratio += proposed_ll - state.data_loglik[t];
        }

        // Process terms, restricted to what the move touches.
        let mut new_locs: Vec<(usize, f64)> = Vec::new();
        if ctx.process_enabled() {
            log_ratio += tn_logpdf(proposed, state.loc[(j, t)], sigma2)
                - tn_logpdf(current, state.loc[(j, t)], sigma2);
            for &(s, omega) in &state.dependents[t] {
                let mu_new = state.mu[(j, s)] + omega * delta_beta;
                let loc_new = clamped_location(mu_new, sigma2, eps);
                log_ratio += tn_logpdf(state.beta[(j, s)], loc_new, sigma2)
                    - tn_logpdf(state.beta[(j, s)], state.loc[(j, s)], sigma2);
                new_locs.push((s, loc_new));
            }
        }

        if ctx.config.jacobian == JacobianMode::Corrected {
            log_ratio += proposed.ln() - current.ln();
        }
        if log_ratio.is_nan() {
            return Err(Error::Numerical(format!(
                "non-finite acceptance ratio at coefficient ({j}, {t})"
            )));
        }

        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            tuning.accept_beta += 1;
            tuning.win_accept_beta[(j, t)] += 1.0;
            state.beta[(j, t)] = proposed;
            if !ctx.is_masked(t) {
                let y = ctx.data.period(t);
                for i in 0..n_y {
                    state.lambda[(i, t)] += psi[(i, j)] * delta_beta;
                }
                state.data_loglik[t] = poisson_loglik(&y, {
                    for i in 0..n_y {
                        lambda_scratch[i] = state.lambda[(i, t)];
                    }
                    &lambda_scratch
                })?;
            } else {
                for i in 0..n_y {
                    state.lambda[(i, t)] += psi[(i, j)] * delta_beta;
                }
            }
            for &(s, omega) in &state.dependents[t] {
                state.mu[(j, s)] += omega * delta_beta;
            }
            for (s, loc_new) in new_locs {
                state.loc[(j, s)] = loc_new;
            }
        }
    }
    Ok(())
}

/// Process log density of the whole field under candidate `(key, m, theta1,
/// sigma2)`, used by the discrete inverse-transform blocks.
fn candidate_process_sum(
    ctx: &ModelContext<'_>,
    beta: &DMatrix<f64>,
    key: &CacheKey,
    m: usize,
    theta1: f64,
    sigma2: f64,
) -> Result<f64> {
    let (_, mu) = weights_and_means(ctx, beta, key, m, theta1)?;
    let loc = locations(&mu, sigma2, ctx.hyper.eps);
    let mut total = 0.0;
    for t in 0..beta.ncols() {
        for j in 0..beta.nrows() {
            total += tn_logpdf(beta[(j, t)], loc[(j, t)], sigma2);
        }
    }
    Ok(total)
}

/// Inverse-transform draw over a discrete grid given log masses; normalizes
/// by max-subtraction, never by direct multiplication.
fn inverse_transform_select<R: Rng + ?Sized>(log_masses: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "all grid masses vanished in an inverse-transform step".into(),
        ));
    }
    let weights: Vec<f64> = log_masses.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u <= acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Shared implementation of the discrete parameter blocks.
fn discrete_step<R: Rng + ?Sized, F>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    grid: &[usize],
    rng: &mut R,
    to_candidate: F,
) -> Result<usize>
where
    F: Fn(&ModelParams, usize) -> (CacheKey, usize, f64),
{
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let chosen = if grid.len() == 1 || !ctx.process_enabled() {
        // A single candidate (or a disabled process term) makes the masses
        // uniform; draw directly.
        if ctx.process_enabled() {
            grid[0]
        } else {
            grid[rng.random_range(0..grid.len())]
        }
    } else {
        let mut log_masses = Vec::with_capacity(grid.len());
        for &g in grid {
            let (key, m, theta1) = to_candidate(&state.params, g);
            log_masses.push(candidate_process_sum(
                ctx,
                &state.beta,
                &key,
                m,
                theta1,
                state.params.sigma2_eta,
            )?);
        }
        grid[inverse_transform_select(&log_masses, rng)?]
    };
    Ok(chosen)
}

/// Block 2: inverse-transform draw of the neighborhood size `m`.
pub fn step_m<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    rng: &mut R,
) -> Result<()> {
    let grid = ctx.hyper.m_grid();
    let chosen = discrete_step(ctx, state, &grid, rng, |p, g| {
        (CacheKey { k_nn: p.k_nn, q: p.q }, g, p.theta1)
    })?;
    if chosen != state.params.m {
        state.params.m = chosen;
        state.rebuild_weights(ctx)?;
    }
    Ok(())
}

/// Block 3: inverse-transform draw of the embedding length `q`.
pub fn step_q<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    rng: &mut R,
) -> Result<()> {
    let grid = ctx.hyper.q_grid();
    let chosen = discrete_step(ctx, state, &grid, rng, |p, g| {
        (CacheKey { k_nn: p.k_nn, q: g }, p.m, p.theta1)
    })?;
    if chosen != state.params.q {
        state.params.q = chosen;
        state.rebuild_weights(ctx)?;
    }
    Ok(())
}

/// Eigenmap-mode block: inverse-transform draw of the neighbor count over
/// its grid, mirroring the `m` and `q` steps.
pub fn step_knn<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    rng: &mut R,
) -> Result<()> {
    if state.params.k_nn.is_none() {
        return Ok(());
    }
    let grid = ctx.hyper.knn_grid.clone();
    let chosen = discrete_step(ctx, state, &grid, rng, |p, g| {
        (CacheKey { k_nn: Some(g), q: p.q }, p.m, p.theta1)
    })?;
    if state.params.k_nn != Some(chosen) {
        state.params.k_nn = Some(chosen);
        state.rebuild_weights(ctx)?;
    }
    Ok(())
}

/// Block 4: log-normal MH update of the kernel bandwidth `theta1`.
///
/// Neighborhoods depend only on distances, so the proposal reuses them and
/// only the weight values, analog means and locations are rebuilt.
pub fn step_theta1<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    tuning: &mut Tuning,
    rng: &mut R,
) -> Result<()> {
    tuning.attempt_theta1 += 1;
    tuning.win_theta1.1 += 1;
    let current = state.params.theta1;
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    let proposed = (current.ln() + tuning.step_theta1 * z).exp();
    if !proposed.is_finite() || proposed <= 0.0 {
        return Ok(());
    }

    let mut log_ratio = inverse_gamma_logpdf(proposed, ctx.hyper.a1, ctx.hyper.b1)
        - inverse_gamma_logpdf(current, ctx.hyper.a1, ctx.hyper.b1);
    if ctx.process_enabled() {
        let key = state.key();
        let proposed_sum = candidate_process_sum(
            ctx,
            &state.beta,
            &key,
            state.params.m,
            proposed,
            state.params.sigma2_eta,
        )?;
        log_ratio += proposed_sum - state.process_sum();
    }
    if ctx.config.jacobian == JacobianMode::Corrected {
        log_ratio += proposed.ln() - current.ln();
    }
    if log_ratio.is_nan() {
        return Err(Error::Numerical("non-finite theta1 acceptance ratio".into()));
    }

    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        tuning.accept_theta1 += 1;
        tuning.win_theta1.0 += 1;
        state.params.theta1 = proposed;
        state.rebuild_weights(ctx)?;
    }
    Ok(())
}

/// Block 5: log-normal MH update of the process variance `sigma2_eta`.
///
/// The variance enters both the truncated-normal spread and the bias
/// correction inside the location clamp, so locations are recomputed from
/// the unchanged analog means.
pub fn step_sigma2<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    tuning: &mut Tuning,
    rng: &mut R,
) -> Result<()> {
    tuning.attempt_sigma2 += 1;
    tuning.win_sigma2.1 += 1;
    let current = state.params.sigma2_eta;
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    let proposed = (current.ln() + tuning.step_sigma2 * z).exp();
    if !proposed.is_finite() || proposed <= 0.0 {
        return Ok(());
    }

    let mut log_ratio = inverse_gamma_logpdf(proposed, ctx.hyper.a2, ctx.hyper.b2)
        - inverse_gamma_logpdf(current, ctx.hyper.a2, ctx.hyper.b2);
    let mut proposed_loc = None;
    if ctx.process_enabled() {
        let loc_new = locations(&state.mu, proposed, ctx.hyper.eps);
        let mut proposed_sum = 0.0;
        for t in 0..state.beta.ncols() {
            for j in 0..state.beta.nrows() {
                proposed_sum += tn_logpdf(state.beta[(j, t)], loc_new[(j, t)], proposed);
            }
        }
        log_ratio += proposed_sum - state.process_sum();
        proposed_loc = Some(loc_new);
    }
    if ctx.config.jacobian == JacobianMode::Corrected {
        log_ratio += proposed.ln() - current.ln();
    }
    if log_ratio.is_nan() {
        return Err(Error::Numerical("non-finite sigma2 acceptance ratio".into()));
    }

    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        tuning.accept_sigma2 += 1;
        tuning.win_sigma2.0 += 1;
        state.params.sigma2_eta = proposed;
        state.loc = match proposed_loc {
            Some(l) => l,
            None => locations(&state.mu, proposed, ctx.hyper.eps),
        };
    }
    Ok(())
}

/// One full iteration: blocks 1-5 (plus the eigenmap block when active).
pub fn sweep<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    state: &mut ChainState,
    tuning: &mut Tuning,
    rng: &mut R,
) -> Result<()> {
    step_beta(ctx, state, tuning, rng)?;
    step_m(ctx, state, rng)?;
    step_q(ctx, state, rng)?;
    step_knn(ctx, state, rng)?;
    step_theta1(ctx, state, tuning, rng)?;
    step_sigma2(ctx, state, tuning, rng)?;
    Ok(())
}

/// Acceptance rates over the whole run, by block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub beta: f64,
    pub theta1: f64,
    pub sigma2: f64,
}

/// Kept draws and diagnostics from one chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub beta_draws: Vec<DMatrix<f64>>,
    pub param_draws: Vec<ModelParams>,
    pub acceptance: AcceptanceStats,
    /// Posterior-predictive count draws for each masked (held-out) period.
    pub masked_predictive: Vec<(usize, Vec<Vec<u64>>)>,
}

impl ChainOutput {
    pub fn n_draws(&self) -> usize {
        self.param_draws.len()
    }
}

/// Run one chain: adapt proposals during burn-in, then record every
/// post-burn-in iterate. Deterministic given the config seed.
pub fn run_sampler(ctx: &ModelContext<'_>) -> Result<ChainOutput> {
    let cfg = ctx.config;
    if cfg.burn_in > cfg.iterations {
        return Err(Error::Config(format!(
            "burn-in {} exceeds iteration count {}",
            cfg.burn_in, cfg.iterations
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = ChainState::init(ctx)?;
    if !state.log_posterior(ctx).is_finite() {
        return Err(Error::Numerical(
            "initial state has non-finite log posterior".into(),
        ));
    }
    let mut tuning = Tuning::new(ctx.n_beta(), ctx.n_periods(), cfg.init_step);

    let kept = cfg.iterations - cfg.burn_in;
    let mut out = ChainOutput {
        beta_draws: Vec::with_capacity(kept),
        param_draws: Vec::with_capacity(kept),
        acceptance: AcceptanceStats { beta: 0.0, theta1: 0.0, sigma2: 0.0 },
        masked_predictive: cfg.likelihood_mask.iter().map(|&t| (t, Vec::new())).collect(),
    };

    for iter in 0..cfg.iterations {
        sweep(ctx, &mut state, &mut tuning, &mut rng)
            .map_err(|e| Error::Numerical(format!("iteration {iter}: {e}")))?;

        let burning = iter < cfg.burn_in;
        if burning && (iter + 1) % cfg.adapt_interval == 0 {
            tuning.adapt(cfg.target_accept);
        }
        if (iter + 1) % REFRESH_INTERVAL == 0 {
            state.refresh_data_caches(ctx)?;
            state.rebuild_weights(ctx)?;
        }
        #[cfg(debug_assertions)]
        state.check_consistency(ctx)?;

        if !burning {
            out.beta_draws.push(state.beta.clone());
            out.param_draws.push(state.params);
            for (t, draws) in out.masked_predictive.iter_mut() {
                let mut y = Vec::with_capacity(ctx.data.n_locations());
                for i in 0..ctx.data.n_locations() {
                    y.push(sample_poisson(&mut rng, state.lambda[(i, *t)]));
                }
                draws.push(y);
            }
        }
    }

    out.acceptance = AcceptanceStats {
        beta: tuning.beta_rate(),
        theta1: tuning.theta1_rate(),
        sigma2: tuning.sigma2_rate(),
    };
    Ok(out)
}

use rand::SeedableRng;

fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Posterior-predictive forecast for the period one past the record.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    /// One row per kept draw, one column per location.
    pub draws: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Site-wise 2.5th percentile.
    pub lower: DVector<f64>,
    /// Site-wise 97.5th percentile.
    pub upper: DVector<f64>,
    /// Per draw, the analog (response index) carrying the largest forecast
    /// weight.
    pub top_analog: Vec<usize>,
}

/// Push every kept draw through the forecast composition: weights for the
/// target from that draw's parameters, `beta = B omega` (optionally with
/// truncated-normal process noise), then a Poisson draw of the counts.
pub fn forecast<R: Rng + ?Sized>(
    ctx: &ModelContext<'_>,
    output: &ChainOutput,
    rng: &mut R,
) -> Result<ForecastResult> {
    let t_len = ctx.n_periods();
    let target_pos = ctx.cache.position_of(t_len).map_err(|_| {
        Error::InsufficientHistory(
            "distance cache has no forecast target; the forcing record must reach the \
             forecast initial condition"
                .into(),
        )
    })?;
    if output.n_draws() == 0 {
        return Err(Error::Domain("no kept draws to forecast from".into()));
    }

    let n_y = ctx.data.n_locations();
    let n_draws = output.n_draws();
    let mut draws = DMatrix::zeros(n_draws, n_y);
    let mut top_analog = Vec::with_capacity(n_draws);

    for (d, (beta, params)) in output.beta_draws.iter().zip(&output.param_draws).enumerate() {
        let key = CacheKey { k_nn: params.k_nn, q: params.q };
        let w = ctx.cache.weights(&key, target_pos, params.m, params.theta1)?;
        let best = w
            .nonzero()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(l, _)| l)
            .unwrap();
        top_analog.push(best);

        let mut beta_next = DVector::zeros(beta.nrows());
        for (l, omega) in w.nonzero() {
            for j in 0..beta.nrows() {
                beta_next[j] += omega * beta[(j, l)];
            }
        }
        if ctx.config.forecast_noise {
            for j in 0..beta_next.len() {
                let loc = clamped_location(beta_next[j], params.sigma2_eta, ctx.hyper.eps);
                beta_next[j] = tn_sample(rng, loc, params.sigma2_eta);
            }
        }
        let lambda = ctx.factorization.reconstruct(&beta_next)?;
        for i in 0..n_y {
            draws[(d, i)] = sample_poisson(rng, lambda[i]) as f64;
        }
    }

    let mean = DVector::from_fn(n_y, |i, _| draws.column(i).sum() / n_draws as f64);
    let lower = percentiles(&draws, 0.025);
    let upper = percentiles(&draws, 0.975);
    Ok(ForecastResult { draws, mean, lower, upper, top_analog })
}

/// Site-wise empirical percentile with linear interpolation.
fn percentiles(draws: &DMatrix<f64>, p: f64) -> DVector<f64> {
    let n = draws.nrows();
    DVector::from_fn(draws.ncols(), |i, _| {
        let mut col: Vec<f64> = draws.column(i).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        col[lo] + frac * (col[hi] - col[lo])
    })
}
