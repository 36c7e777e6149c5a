//! End-to-end orchestration: anomalies, factorization, dimension reduction,
//! distance cache, chains, and posterior-predictive summaries, plus the run
//! manifest that makes a pipeline invocation reproducible bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analog::{
    build_distance_cache, CoefficientSource, DistanceCache, ProcrustesMode,
};
use crate::data::{anomalize, AlignmentSpec, CountField, ForcingField, TimeAlignment, TimeStamp};
use crate::dimred::{compute_eofs, precompute_le_grid, ForcingCoefficients};
use crate::error::{Error, Result};
use crate::eval::{climatology_forecast, evaluate, persistence_forecast, Evaluation};
use crate::nmf::{fit as nmf_fit, Factorization, NmfOptions};
use crate::sampler::{
    forecast as sample_forecast, run_sampler, ChainOutput, ForecastResult, ModelContext,
    SamplerConfig,
};
use crate::stochastic::Hyperparams;

/// Forcing reduction method: EOF basis (HBA1-style) or Laplacian eigenmaps
/// (HBA2-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eof,
    Le,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Eof => "HBA1",
            Method::Le => "HBA2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    pub n_beta: usize,
    pub n_alpha: usize,
    pub alignment: AlignmentSpec,
    pub hyper: Hyperparams,
    pub nmf: NmfOptions,
    pub sampler: SamplerConfig,
    pub chains: usize,
    /// Climatology reference window; `None` means the full record.
    pub anomaly_window: Option<(TimeStamp, TimeStamp)>,
    pub procrustes: ProcrustesMode,
}

/// Everything a fit produces, in memory.
pub struct FittedModel {
    pub training: CountField,
    pub factorization: Factorization,
    pub coefficients: BTreeMap<Option<usize>, ForcingCoefficients>,
    pub cache: DistanceCache,
    pub align: TimeAlignment,
    pub hyper: Hyperparams,
    pub sampler: SamplerConfig,
    pub chains: Vec<ChainOutput>,
    pub has_forecast_target: bool,
}

/// Run the full training pipeline on a count field and a forcing field.
///
/// The forecast target (one period past the training record) is included in
/// the distance cache whenever the forcing record reaches its initial
/// condition; otherwise fitting proceeds and only forecasting is
/// unavailable.
pub fn fit_pipeline(
    counts: &CountField,
    forcing: &ForcingField,
    opts: &FitOptions,
) -> Result<FittedModel> {
    opts.hyper.validate().map_err(|e| e.in_stage("config"))?;
    forcing
        .periods_per_response(&counts.times)
        .map_err(|e| e.in_stage("config"))?;
    if opts.chains == 0 {
        return Err(Error::Config("at least one chain required".into()).in_stage("config"));
    }

    // Anomalies.
    let (ref_start, ref_end) = opts
        .anomaly_window
        .unwrap_or((forcing.times.first, forcing.times.last()));
    let anomalies =
        anomalize(forcing, ref_start, ref_end).map_err(|e| e.in_stage("anomalize"))?;

    // Count factorization.
    let factorization = nmf_fit(&counts.to_f64(), opts.n_beta, &opts.nmf)
        .map_err(|e| e.in_stage("nmf"))?;

    // Forcing reduction.
    let mut coefficients: BTreeMap<Option<usize>, ForcingCoefficients> = BTreeMap::new();
    match opts.method {
        Method::Eof => {
            let eof = compute_eofs(&anomalies.values, opts.n_alpha)
                .map_err(|e| e.in_stage("dimred"))?;
            coefficients.insert(None, eof.coeffs);
        }
        Method::Le => {
            let grid = precompute_le_grid(&anomalies.values, opts.n_alpha, &opts.hyper.knn_grid);
            for (k, res) in grid {
                let coeffs = res.map_err(|e| e.in_stage("dimred"))?;
                coefficients.insert(Some(k), coeffs);
            }
            if coefficients.is_empty() {
                return Err(Error::Config("empty eigenmap grid".into()).in_stage("dimred"));
            }
        }
    }

    // Distance cache over the q grid (and eigenmap grid), with the forecast
    // target appended when its embedding is buildable.
    let align = TimeAlignment {
        spec: opts.alignment,
        response: counts.times,
        forcing: forcing.times,
    };
    let t_len = counts.n_periods();
    let sample_coeffs = coefficients.values().next().unwrap();
    let forecast_ok = crate::analog::build_embedding(
        sample_coeffs,
        t_len,
        opts.hyper.q_max,
        &align,
    )
    .is_ok();
    let mut candidates: Vec<usize> = (0..t_len).collect();
    if forecast_ok {
        candidates.push(t_len);
    }

    let le_map: BTreeMap<usize, ForcingCoefficients>;
    let source = match opts.method {
        Method::Eof => CoefficientSource::Single(&coefficients[&None]),
        Method::Le => {
            le_map = coefficients
                .iter()
                .map(|(k, v)| (k.unwrap(), v.clone()))
                .collect();
            CoefficientSource::PerKnn(&le_map)
        }
    };
    let cache = build_distance_cache(
        source,
        &align,
        (opts.hyper.q_min, opts.hyper.q_max),
        candidates,
        t_len,
        opts.procrustes,
    )
    .map_err(|e| e.in_stage("distance-cache"))?;

    // Chains, each with its own derived seed.
    let mut chains = Vec::with_capacity(opts.chains);
    for chain_idx in 0..opts.chains {
        let chain_cfg = SamplerConfig {
            seed: opts.sampler.seed.wrapping_add(chain_idx as u64),
            ..opts.sampler.clone()
        };
        let ctx = ModelContext {
            data: counts,
            factorization: &factorization,
            cache: &cache,
            hyper: &opts.hyper,
            align: &align,
            config: &chain_cfg,
        };
        chains.push(run_sampler(&ctx).map_err(|e| e.in_stage("sampler"))?);
    }

    Ok(FittedModel {
        training: counts.clone(),
        factorization,
        coefficients,
        cache,
        align,
        hyper: opts.hyper.clone(),
        sampler: opts.sampler.clone(),
        chains,
        has_forecast_target: forecast_ok,
    })
}

impl FittedModel {
    /// Pooled posterior-predictive forecast of the period one past the
    /// training record, drawing each chain with a derived seed.
    pub fn forecast(&self) -> Result<ForecastResult> {
        if !self.has_forecast_target {
            return Err(Error::InsufficientHistory(
                "forcing record does not reach the forecast initial condition".into(),
            )
            .in_stage("forecast"));
        }
        let mut all_draws: Vec<DMatrix<f64>> = Vec::new();
        let mut top_analog = Vec::new();
        for (idx, chain) in self.chains.iter().enumerate() {
            let cfg = SamplerConfig {
                seed: self.sampler.seed.wrapping_add(idx as u64),
                ..self.sampler.clone()
            };
            let ctx = ModelContext {
                data: &self.training,
                factorization: &self.factorization,
                cache: &self.cache,
                hyper: &self.hyper,
                align: &self.align,
                config: &cfg,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf0f0_f0f0);
            let fc = sample_forecast(&ctx, chain, &mut rng).map_err(|e| e.in_stage("forecast"))?;
            top_analog.extend(fc.top_analog);
            all_draws.push(fc.draws);
        }
        let n_y = all_draws[0].ncols();
        let total: usize = all_draws.iter().map(|d| d.nrows()).sum();
        let mut draws = DMatrix::zeros(total, n_y);
        let mut row = 0;
        for block in &all_draws {
            for r in 0..block.nrows() {
                for c in 0..n_y {
                    draws[(row, c)] = block[(r, c)];
                }
                row += 1;
            }
        }
        Ok(summarize_forecast(draws, top_analog))
    }

    /// Pooled posterior-predictive draws for a masked (held-out) period.
    pub fn hindcast(&self, t: usize) -> Result<ForecastResult> {
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for chain in &self.chains {
            let found = chain.masked_predictive.iter().find(|(tt, _)| *tt == t);
            match found {
                Some((_, draws)) => rows.extend(draws.iter().cloned()),
                None => {
                    return Err(Error::Domain(format!(
                        "period {t} was not masked in this fit"
                    )))
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Domain("no kept draws for the masked period".into()));
        }
        let n_y = rows[0].len();
        let draws = DMatrix::from_fn(rows.len(), n_y, |r, c| rows[r][c] as f64);
        Ok(summarize_forecast(draws, Vec::new()))
    }

    /// Pooled parameter draws across chains.
    pub fn pooled_params(&self) -> Vec<crate::stochastic::ModelParams> {
        self.chains.iter().flat_map(|c| c.param_draws.iter().copied()).collect()
    }
}

fn summarize_forecast(draws: DMatrix<f64>, top_analog: Vec<usize>) -> ForecastResult {
    let n = draws.nrows();
    let n_y = draws.ncols();
    let mean = DVector::from_fn(n_y, |i, _| draws.column(i).sum() / n as f64);
    let pct = |p: f64| {
        DVector::from_fn(n_y, |i, _| {
            let mut col: Vec<f64> = draws.column(i).iter().copied().collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            col[lo] + (pos - lo as f64) * (col[hi] - col[lo])
        })
    };
    let lower = pct(0.025);
    let upper = pct(0.975);
    ForecastResult { draws, mean, lower, upper, top_analog }
}

/// Score a forecast (or baseline) grid against observed counts.
pub fn score(predicted: &DVector<f64>, observed: &[u64]) -> Result<Evaluation> {
    evaluate(predicted, observed)
}

/// The two reference forecasts used in place of a dynamical comparison
/// model: per-site training mean and last training period.
pub fn baselines(training: &CountField) -> (DVector<f64>, DVector<f64>) {
    (climatology_forecast(training), persistence_forecast(training))
}

/// SHA-256 hex digest of a byte slice.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(hash_bytes(&bytes))
}

/// Reproducibility record for one CLI run. Deliberately carries no
/// timestamps so reruns with the same inputs are bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// Output file name -> SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record_stage(&mut self, stage: &str) {
        self.stages.push(stage.to_string());
    }

    pub fn record_artifact(&mut self, name: &str, path: &Path) -> Result<()> {
        self.artifacts.insert(name.to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Numerical(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json + "\n")
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
