//! Synthetic data generators for desk-scale validation: a Lorenz-63-driven
//! count field and a deterministic repeating-regime cycle with planted
//! analog structure.
//!
//! Both generators share one observation layout. A latent trajectory is
//! sampled at forcing resolution; the forcing field is a linear spatial
//! mixture of the latent state (orthonormal patterns, optional measurement
//! noise); counts are Poisson draws around `Psi_true * beta_t`, where the
//! coefficient vector for a response period is tied to the latent state at
//! that period's own time stamp. Forecasting the counts from the forcing
//! `tau` steps earlier therefore requires recovering the latent trajectory,
//! which is exactly what the analog machinery is supposed to do.
//!
//! The repeating-regime cycle assigns each response period a phase in a
//! cycle of length `period`; coefficient patterns repeat exactly with the
//! phase. A small deterministic quasi-periodic carrier rides on top of the
//! phase motifs so embedding windows of different lengths rank candidate
//! analogs differently. With `process_noise > 0` the coefficients are drawn
//! from the model's own truncated-normal conditionals under weights built at
//! a planted embedding length `q_true`, which a correct sampler should
//! recover as the posterior mode of `q`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::analog::{build_distance_cache, CacheKey, CoefficientSource, ProcrustesMode};
use crate::data::{AlignmentSpec, CountField, ForcingField, Location, TimeAlignment, TimeAxis, TimeStamp};
use crate::error::{Error, Result};
use crate::stochastic::{clamped_location, tn_sample};

/// Latent dynamical system behind a synthetic dataset.
#[derive(Debug, Clone)]
pub enum LatentSystem {
    /// Classic Lorenz-63 (sigma 10, rho 28, beta 8/3) integrated with RK4 at
    /// `dt` model-time units per forcing period.
    Lorenz63 { dt: f64 },
    /// Deterministic repeating-regime cycle with `period` phases.
    PlantedAnalogCycle {
        period: usize,
        /// Embedding length (forcing periods) used to build the generating
        /// analog weights when `process_noise > 0`.
        q_true: usize,
        m_true: usize,
        theta1_true: f64,
        /// Truncated-normal process scale for model-generated coefficients;
        /// zero keeps the exact per-phase patterns.
        process_noise: f64,
        /// Carrier amplitude relative to the unit motif amplitude.
        carrier_amplitude: f64,
        /// Gibbs sweeps used when drawing coefficients from the model.
        gibbs_sweeps: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub system: LatentSystem,
    pub n_y: usize,
    pub n_x: usize,
    pub n_beta_true: usize,
    /// Response periods emitted (training plus any holdout tail).
    pub t_total: usize,
    /// Forcing periods of history before the first response stamp; must
    /// cover `tau + q_max` for the embeddings the fit will build.
    pub history: usize,
    pub periods_per_response: usize,
    /// Forecast lead in forcing periods.
    pub tau: u32,
    /// Standard deviation of measurement noise added to the forcing field.
    pub forcing_noise: f64,
    /// Rough mean intensity of the generated counts.
    pub count_scale: f64,
    pub seed: u64,
}

/// Ground truth retained alongside a generated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub psi_true: DMatrix<f64>,
    /// `n_beta x t_total` coefficients actually used for the intensities.
    pub beta_true: DMatrix<f64>,
    /// `n_y x t_total` Poisson intensities.
    pub intensities: DMatrix<f64>,
    /// Latent states per forcing period (rows are latent dimensions).
    pub latent: DMatrix<f64>,
    /// Orthonormal spatial mixing patterns (`n_x x d`).
    pub spatial_patterns: DMatrix<f64>,
    /// Phase of each response period (cycle system only).
    pub phase: Option<Vec<usize>>,
    /// Same-phase analog indices per response period (cycle system only).
    pub analog_sets: Option<Vec<Vec<usize>>>,
    /// Planted embedding length (cycle system with model-generated betas).
    pub q_true: Option<usize>,
}

/// Time axes implied by a spec: monthly forcing starting 2000-01, response
/// periods every `periods_per_response` months starting `history` months in.
pub fn synthetic_axes(spec: &SyntheticSpec) -> (TimeAxis, TimeAxis) {
    let first = TimeStamp::from_year_month(2000, 1).unwrap();
    let s = spec.periods_per_response;
    let forcing_len = spec.history + spec.t_total * s + 1;
    let forcing = TimeAxis::new(first, 1, forcing_len).unwrap();
    let response = TimeAxis::new(
        first.plus_months(spec.history as i64),
        s as u32,
        spec.t_total,
    )
    .unwrap();
    (response, forcing)
}

fn grid_locations(n: usize, prefix: &str) -> Vec<Location> {
    (0..n)
        .map(|i| Location {
            id: format!("{prefix}{i}"),
            lon: -120.0 + (i % 20) as f64,
            lat: 40.0 + (i / 20) as f64,
        })
        .collect()
}

/// Random matrix with orthonormal columns.
fn orthonormal_patterns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let qr = g.qr();
    qr.q().columns(0, cols).into_owned()
}

fn standardize_rows(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        let n = m.ncols() as f64;
        let mean = m.row(r).sum() / n;
        let var = m.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        for c in 0..m.ncols() {
            m[(r, c)] = (m[(r, c)] - mean) / sd;
        }
    }
}

fn lorenz_rhs(z: &[f64; 3]) -> [f64; 3] {
    let (x, y, w) = (z[0], z[1], z[2]);
    [10.0 * (y - x), x * (28.0 - w) - y, x * y - 8.0 / 3.0 * w]
}

fn rk4_step(z: &[f64; 3], dt: f64) -> [f64; 3] {
    let k1 = lorenz_rhs(z);
    let mid1 = [z[0] + 0.5 * dt * k1[0], z[1] + 0.5 * dt * k1[1], z[2] + 0.5 * dt * k1[2]];
    let k2 = lorenz_rhs(&mid1);
    let mid2 = [z[0] + 0.5 * dt * k2[0], z[1] + 0.5 * dt * k2[1], z[2] + 0.5 * dt * k2[2]];
    let k3 = lorenz_rhs(&mid2);
    let end = [z[0] + dt * k3[0], z[1] + dt * k3[1], z[2] + dt * k3[2]];
    let k4 = lorenz_rhs(&end);
    [
        z[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        z[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        z[2] + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Lorenz-63 trajectory sampled once per forcing period, transient skipped.
pub fn lorenz63_trajectory(len: usize, dt: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = [
        1.0 + rng.random::<f64>(),
        1.0 + rng.random::<f64>(),
        20.0 + rng.random::<f64>(),
    ];
    // Sub-step for accuracy, and burn in onto the attractor first.
    let sub = 10usize;
    let h = dt / sub as f64;
    for _ in 0..(1000 * sub) {
        z = rk4_step(&z, h);
    }
    let mut out = DMatrix::zeros(3, len);
    for c in 0..len {
        for _ in 0..sub {
            z = rk4_step(&z, h);
        }
        out[(0, c)] = z[0];
        out[(1, c)] = z[1];
        out[(2, c)] = z[2];
    }
    out
}

/// Deterministic quasi-periodic carrier: a fixed-seed random Fourier series,
/// irregular but noiseless.
fn carrier_series(len: usize, channels: usize, amplitude: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonics = 8;
    let mut out = DMatrix::zeros(channels, len);
    for ch in 0..channels {
        let mut terms = Vec::with_capacity(harmonics);
        for h in 1..=harmonics {
            let amp = amplitude / h as f64;
            let freq = 0.03 + 0.45 * rng.random::<f64>();
            let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            terms.push((amp, freq, phase));
        }
        for w in 0..len {
            out[(ch, w)] = terms
                .iter()
                .map(|(a, f, p)| a * (2.0 * std::f64::consts::PI * f * w as f64 + p).cos())
                .sum();
        }
    }
    out
}

/// Generate a synthetic dataset per the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<(CountField, ForcingField, SyntheticTruth)> {
    if spec.n_y == 0 || spec.n_x == 0 || spec.n_beta_true == 0 || spec.t_total == 0 {
        return Err(Error::Domain("all synthetic dimensions must be >= 1".into()));
    }
    if spec.periods_per_response == 0 {
        return Err(Error::Domain("periods_per_response must be >= 1".into()));
    }
    if spec.history < spec.tau as usize + 1 {
        return Err(Error::Domain(format!(
            "history {} too short for tau {}",
            spec.history, spec.tau
        )));
    }
    match spec.system {
        LatentSystem::Lorenz63 { .. } => generate_lorenz(spec),
        LatentSystem::PlantedAnalogCycle { .. } => generate_cycle(spec),
    }
}

/// Softplus link mapping latent states to positive coefficients.
fn link_coefficients(
    rng: &mut ChaCha8Rng,
    latent_std: &DMatrix<f64>,
    target_cols: &[usize],
    n_beta: usize,
) -> DMatrix<f64> {
    let d = latent_std.nrows();
    let w = DMatrix::from_fn(n_beta, d, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let bias = DVector::from_fn(n_beta, |_, _| 0.5 * rng.random::<f64>());
    let softplus = |x: f64| {
        if x > 30.0 {
            x
        } else {
            (1.0 + x.exp()).ln()
        }
    };
    DMatrix::from_fn(n_beta, target_cols.len(), |j, t| {
        let mut acc = bias[j];
        for k in 0..d {
            acc += w[(j, k)] * latent_std[(k, target_cols[t])];
        }
        softplus(acc)
    })
}

/// Nonnegative spatial basis with unit column means, scaled so intensities
/// land near `count_scale`.
fn random_basis(rng: &mut ChaCha8Rng, n_y: usize, n_beta: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_y, n_beta, |_, _| 0.05 + rng.random::<f64>())
}

fn generate_lorenz(spec: &SyntheticSpec) -> Result<(CountField, ForcingField, SyntheticTruth)> {
    let LatentSystem::Lorenz63 { dt } = spec.system else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (response_axis, forcing_axis) = synthetic_axes(spec);
    let len = forcing_axis.len;

    let mut latent = lorenz63_trajectory(len, dt, spec.seed ^ 0x5eed);
    standardize_rows(&mut latent);

    let patterns = orthonormal_patterns(&mut rng, spec.n_x, 3);
    let mut forcing_vals = &patterns * &latent;
    if spec.forcing_noise > 0.0 {
        for v in forcing_vals.iter_mut() {
            *v += spec.forcing_noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }

    // Response period t is driven by the latent state at its own stamp.
    let s = spec.periods_per_response;
    let target_cols: Vec<usize> = (0..spec.t_total).map(|t| spec.history + t * s).collect();
    let raw_beta = link_coefficients(&mut rng, &latent, &target_cols, spec.n_beta_true);
    let psi_true = random_basis(&mut rng, spec.n_y, spec.n_beta_true);

    // Scale coefficients so the mean intensity hits count_scale.
    let mean_intensity = (&psi_true * &raw_beta).mean();
    let scale = spec.count_scale / mean_intensity.max(1e-12);
    let beta_true = raw_beta * scale;
    let intensities = &psi_true * &beta_true;

    let counts = draw_counts(&mut rng, &intensities);
    let data = CountField::new(counts, grid_locations(spec.n_y, "y"), response_axis)?;
    let forcing = ForcingField::new(forcing_vals, grid_locations(spec.n_x, "x"), forcing_axis)?;
    Ok((
        data,
        forcing,
        SyntheticTruth {
            psi_true,
            beta_true,
            intensities,
            latent,
            spatial_patterns: patterns,
            phase: None,
            analog_sets: None,
            q_true: None,
        },
    ))
}

fn generate_cycle(spec: &SyntheticSpec) -> Result<(CountField, ForcingField, SyntheticTruth)> {
    let LatentSystem::PlantedAnalogCycle {
        period,
        q_true,
        m_true,
        theta1_true,
        process_noise,
        carrier_amplitude,
        gibbs_sweeps,
    } = spec.system.clone()
    else {
        unreachable!()
    };
    if period < 2 {
        return Err(Error::Domain("cycle period must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (response_axis, forcing_axis) = synthetic_axes(spec);
    let len = forcing_axis.len;
    let s = spec.periods_per_response;

    // Latent: two motif channels tracing the phase ring, plus a
    // quasi-periodic two-channel carrier that makes different window
    // lengths rank analogs differently.
    let cycle_steps = period * s;
    let mut latent = DMatrix::zeros(4, len);
    for w in 0..len {
        let angle = 2.0 * std::f64::consts::PI * (w % cycle_steps) as f64 / cycle_steps as f64;
        latent[(0, w)] = angle.cos();
        latent[(1, w)] = angle.sin();
    }
    let carrier = carrier_series(len, 2, carrier_amplitude, spec.seed ^ 0xca44);
    for w in 0..len {
        latent[(2, w)] = carrier[(0, w)];
        latent[(3, w)] = carrier[(1, w)];
    }

    let patterns = orthonormal_patterns(&mut rng, spec.n_x, 4);
    let mut forcing_vals = &patterns * &latent;
    if spec.forcing_noise > 0.0 {
        for v in forcing_vals.iter_mut() {
            *v += spec.forcing_noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let forcing = ForcingField::new(forcing_vals, grid_locations(spec.n_x, "x"), forcing_axis)?;

    // Per-phase coefficient patterns, repeated exactly along the record.
    let pattern = DMatrix::from_fn(spec.n_beta_true, period, |_, _| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        (0.5 * z).exp()
    });
    let phases: Vec<usize> = (0..spec.t_total).map(|t| t % period).collect();
    let mut beta_true =
        DMatrix::from_fn(spec.n_beta_true, spec.t_total, |j, t| pattern[(j, phases[t])]);

    // Optionally redraw the coefficients from the model's own conditionals
    // under weights built at the planted q, imprinting q_true on the field.
    if process_noise > 0.0 {
        let eof = crate::dimred::compute_eofs(&forcing.values, 4)?;
        let align = TimeAlignment {
            spec: AlignmentSpec::new(spec.tau),
            response: response_axis,
            forcing: forcing_axis,
        };
        let candidates: Vec<usize> = (0..spec.t_total).collect();
        let cache = build_distance_cache(
            CoefficientSource::Single(&eof.coeffs),
            &align,
            (q_true, q_true),
            candidates,
            spec.t_total,
            ProcrustesMode::Orthogonal,
        )?;
        let key = CacheKey { k_nn: None, q: q_true };
        let eps = 1e-6;
        let sigma2 = process_noise * process_noise;
        let mut gibbs_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x91bb5);
        for _ in 0..gibbs_sweeps.max(1) {
            for t in 0..spec.t_total {
                let w = cache.weights(&key, t, m_true, theta1_true)?;
                for j in 0..spec.n_beta_true {
                    let mut mu = 0.0;
                    for (l, omega) in w.nonzero() {
                        mu += omega * beta_true[(j, l)];
                    }
                    let loc = clamped_location(mu, sigma2, eps);
                    beta_true[(j, t)] = tn_sample(&mut gibbs_rng, loc, sigma2);
                }
            }
        }
    }

    let psi_true = random_basis(&mut rng, spec.n_y, spec.n_beta_true);
    let mean_intensity = (&psi_true * &beta_true).mean();
    let scale = spec.count_scale / mean_intensity.max(1e-12);
    let beta_true = beta_true * scale;
    let intensities = &psi_true * &beta_true;
    let counts = draw_counts(&mut rng, &intensities);
    let data = CountField::new(counts, grid_locations(spec.n_y, "y"), response_axis)?;

    let analog_sets: Vec<Vec<usize>> = (0..spec.t_total)
        .map(|t| {
            (0..spec.t_total)
                .filter(|&u| u != t && phases[u] == phases[t])
                .collect()
        })
        .collect();

    Ok((
        data,
        forcing,
        SyntheticTruth {
            psi_true,
            beta_true,
            intensities,
            latent,
            spatial_patterns: patterns,
            phase: Some(phases),
            analog_sets: Some(analog_sets),
            q_true: (process_noise > 0.0).then_some(q_true),
        },
    ))
}

fn draw_counts(rng: &mut ChaCha8Rng, intensities: &DMatrix<f64>) -> DMatrix<u64> {
    DMatrix::from_fn(intensities.nrows(), intensities.ncols(), |i, t| {
        let lambda = intensities[(i, t)];
        if lambda <= 0.0 {
            0
        } else {
            rand_distr::Poisson::new(lambda)
                .map(|d| d.sample(rng) as u64)
                .unwrap_or(0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle_spec(process_noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            system: LatentSystem::PlantedAnalogCycle {
                period: 4,
                q_true: 3,
                m_true: 2,
                theta1_true: 0.1,
                process_noise,
                carrier_amplitude: 0.05,
                gibbs_sweeps: 10,
            },
            n_y: 8,
            n_x: 10,
            n_beta_true: 3,
            t_total: 12,
            history: 10,
            periods_per_response: 1,
            tau: 1,
            forcing_noise: 0.0,
            count_scale: 20.0,
            seed,
        }
    }

    #[test]
    fn noiseless_cycle_repeats_intensities_exactly() {
        let spec = cycle_spec(0.0, 1);
        let (_, _, truth) = generate(&spec).unwrap();
        for t in 0..spec.t_total - 4 {
            for i in 0..spec.n_y {
                assert_eq!(truth.intensities[(i, t)], truth.intensities[(i, t + 4)]);
            }
        }
        let sets = truth.analog_sets.unwrap();
        assert_eq!(sets[0], vec![4, 8]);
        assert_eq!(sets[5], vec![1, 9]);
    }

    #[test]
    fn fixed_seed_reproduces_everything() {
        let spec = cycle_spec(0.3, 7);
        let (c1, f1, t1) = generate(&spec).unwrap();
        let (c2, f2, t2) = generate(&spec).unwrap();
        assert_eq!(c1.counts, c2.counts);
        assert_eq!(f1.values, f2.values);
        assert_eq!(t1.beta_true, t2.beta_true);
        assert_eq!(t1.q_true, Some(3));
    }

    #[test]
    fn eofs_of_noiseless_forcing_span_the_planted_patterns() {
        let spec = SyntheticSpec {
            system: LatentSystem::Lorenz63 { dt: 0.05 },
            n_y: 6,
            n_x: 20,
            n_beta_true: 3,
            t_total: 10,
            history: 8,
            periods_per_response: 2,
            tau: 2,
            forcing_noise: 0.0,
            count_scale: 15.0,
            seed: 3,
        };
        let (_, forcing, truth) = generate(&spec).unwrap();
        let eof = crate::dimred::compute_eofs(&forcing.values, 3).unwrap();
        // Principal angles between the EOF span and the planted span:
        // singular values of Phi' P are the cosines.
        let m = eof.phi.transpose() * &truth.spatial_patterns;
        let svd = m.svd(false, false);
        for s in svd.singular_values.iter() {
            let angle = s.min(1.0).acos();
            assert!(angle < 1e-6, "principal angle {angle}");
        }
    }

    #[test]
    fn lorenz_trajectory_is_on_the_attractor_and_deterministic() {
        let a = lorenz63_trajectory(200, 0.05, 42);
        let b = lorenz63_trajectory(200, 0.05, 42);
        assert_eq!(a, b);
        // Attractor bounds (generous): |x|,|y| < 25, 0 < z < 55.
        for c in 0..200 {
            assert!(a[(0, c)].abs() < 25.0);
            assert!(a[(1, c)].abs() < 30.0);
            assert!(a[(2, c)] > 0.0 && a[(2, c)] < 55.0);
        }
        // Not a fixed point: the trajectory actually moves.
        assert!((a.column(0) - a.column(100)).norm() > 1.0);
    }

    #[test]
    fn rk4_halving_agreement() {
        // One coarse step against two half steps: local error collapses.
        let z0 = [3.0, -2.0, 22.0];
        let full = rk4_step(&z0, 0.02);
        let half = rk4_step(&rk4_step(&z0, 0.01), 0.01);
        for i in 0..3 {
            assert!((full[i] - half[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn axes_line_up_with_alignment() {
        let spec = cycle_spec(0.0, 5);
        let (response, forcing) = synthetic_axes(&spec);
        let align = TimeAlignment {
            spec: AlignmentSpec::new(spec.tau),
            response,
            forcing,
        };
        // Initial condition for period t sits tau steps before its stamp.
        for t in 0..=spec.t_total {
            let idx = align.align(t).unwrap();
            assert_eq!(idx, spec.history + t - 1);
        }
    }

    #[test]
    fn dimension_validation() {
        let mut spec = cycle_spec(0.0, 1);
        spec.n_y = 0;
        assert!(generate(&spec).is_err());
        let mut spec = cycle_spec(0.0, 1);
        spec.history = 1;
        spec.tau = 5;
        assert!(generate(&spec).is_err());
    }
}
