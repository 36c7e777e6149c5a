//! Analog-selection machinery: lag-embedding matrices, Procrustes shape
//! distance, nearest-neighbor neighborhoods, Gaussian kernel weights, and
//! the distance cache that makes the per-iteration grid sweeps tractable.
//!
//! An embedding matrix stacks the forcing coefficient vectors at lags
//! `0..q` behind a response period's initial condition; two periods are
//! compared by superimposing one embedding onto the other through
//! translation (column centering), scaling and an orthogonal rotation of
//! lag space, then taking the residual Frobenius norm.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeAlignment;
use crate::dimred::ForcingCoefficients;
use crate::error::{Error, Result};
use crate::io;

/// Lagged forcing-coefficient slab for one response period: column `j` is
/// the coefficient vector `j` forcing periods behind the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `n_alpha x q`.
    pub a: DMatrix<f64>,
    pub response_index: usize,
    pub q: usize,
}

/// Build the embedding for response index `t` with `q` lags.
pub fn build_embedding(
    coeffs: &ForcingCoefficients,
    t: usize,
    q: usize,
    align: &TimeAlignment,
) -> Result<EmbeddingMatrix> {
    if q == 0 {
        return Err(Error::Domain("q must be >= 1".into()));
    }
    let t_prime = align.align(t)?;
    if t_prime + 1 < q {
        return Err(Error::InsufficientHistory(format!(
            "embedding for response {t} needs lag {q} but initial condition sits at \
             forcing index {t_prime}"
        )));
    }
    if t_prime >= coeffs.n_periods() {
        return Err(Error::Dimension(format!(
            "aligned forcing index {t_prime} beyond coefficient series of length {}",
            coeffs.n_periods()
        )));
    }
    let n_alpha = coeffs.n_alpha();
    let a = DMatrix::from_fn(n_alpha, q, |i, j| coeffs.alpha[(i, t_prime - j)]);
    Ok(EmbeddingMatrix { a, response_index: t, q })
}

/// Whether the optimal lag-space map may include reflections (any orthogonal
/// matrix) or is restricted to proper rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProcrustesMode {
    #[default]
    Orthogonal,
    RotationOnly,
}

/// Outcome of a Procrustes comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesResult {
    pub distance: f64,
    /// Fitted scaling applied to the comparison object.
    pub scaling: f64,
    /// Set when the centered comparison matrix vanished; by convention the
    /// distance is then the norm of the centered target and scaling is 1.
    pub degenerate: bool,
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / col.len() as f64;
        for v in col.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Procrustes distance between a target `e` and comparison `f` of equal
/// shape: center both by column means, fit the orthogonal `R` and scaling
/// from the SVD of `F~' E~`, and return the residual `||E~ - s F~ R||_F`.
pub fn procrustes_distance(
    e: &DMatrix<f64>,
    f: &DMatrix<f64>,
    mode: ProcrustesMode,
) -> Result<ProcrustesResult> {
    if e.shape() != f.shape() {
        return Err(Error::Dimension(format!(
            "embedding shapes differ: {:?} vs {:?}",
            e.shape(),
            f.shape()
        )));
    }
    let e_c = center_columns(e);
    let f_c = center_columns(f);
    let nf2 = f_c.norm_squared();
    if nf2 == 0.0 {
        return Ok(ProcrustesResult { distance: e_c.norm(), scaling: 1.0, degenerate: true });
    }

    let m = f_c.transpose() * &e_c;
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD produced no U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD produced no V".into()))?;

    let q = e.ncols();
    let (rotation, tr) = match mode {
        ProcrustesMode::Orthogonal => (u * v_t, svd.singular_values.sum()),
        ProcrustesMode::RotationOnly => {
            // Flip the weakest direction when the unconstrained optimum is a
            // reflection (singular values are sorted descending).
            let det = (u * v_t).determinant();
            if det < 0.0 {
                let mut u_adj = u.clone();
                for i in 0..u_adj.nrows() {
                    u_adj[(i, q - 1)] = -u_adj[(i, q - 1)];
                }
                let tr = svd.singular_values.iter().take(q - 1).sum::<f64>()
                    - svd.singular_values[q - 1];
                (u_adj * v_t, tr)
            } else {
                (u * v_t, svd.singular_values.sum())
            }
        }
    };
    let scaling = tr / nf2;
    let residual = &e_c - &f_c * rotation * scaling;
    Ok(ProcrustesResult { distance: residual.norm(), scaling, degenerate: false })
}

pub fn procrustes_between(
    e: &EmbeddingMatrix,
    f: &EmbeddingMatrix,
    mode: ProcrustesMode,
) -> Result<ProcrustesResult> {
    procrustes_distance(&e.a, &f.a, mode)
}

/// Gaussian kernel value for one distance: `exp(-d^2 / (2 theta1))`.
pub fn unnormalized_weight(d: f64, theta1: f64) -> f64 {
    (-d * d / (2.0 * theta1)).exp()
}

/// Normalized analog weights over a candidate set.
///
/// Candidates outside the `m`-nearest neighborhood carry weight exactly
/// zero; the rest carry the Gaussian kernel weight normalized over the full
/// candidate list. Distance ties at the neighborhood boundary break toward
/// the smaller candidate index.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// Candidate response indices, in input order.
    pub candidates: Vec<usize>,
    /// Normalized weights parallel to `candidates`; sums to one.
    pub omega: Vec<f64>,
    /// Positions (into `candidates`) of the neighborhood, nearest first.
    pub neighbor_positions: Vec<usize>,
}

impl WeightVector {
    /// Response indices of the neighborhood members, nearest first.
    pub fn neighborhood(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_positions.iter().map(|&p| self.candidates[p])
    }

    /// `(response index, weight)` for the nonzero entries.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.neighbor_positions
            .iter()
            .map(|&p| (self.candidates[p], self.omega[p]))
    }

    pub fn weight_for(&self, response_index: usize) -> f64 {
        self.candidates
            .iter()
            .position(|&c| c == response_index)
            .map(|p| self.omega[p])
            .unwrap_or(0.0)
    }
}

/// Compute kernel weights from precomputed distances.
///
/// `dists[i]` is the distance from the target to `candidates[i]`.
pub fn kernel_weights(
    candidates: &[usize],
    dists: &[f64],
    m: usize,
    theta1: f64,
) -> Result<WeightVector> {
    if candidates.len() != dists.len() {
        return Err(Error::Dimension("candidate/distance length mismatch".into()));
    }
    if m == 0 || m > candidates.len() {
        return Err(Error::Domain(format!(
            "neighborhood size {m} out of range 1..={}",
            candidates.len()
        )));
    }
    if !(theta1 > 0.0) {
        return Err(Error::Domain(format!("theta1 must be > 0, got {theta1}")));
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .unwrap()
            .then(candidates[a].cmp(&candidates[b]))
    });
    let neighbor_positions: Vec<usize> = order[..m].to_vec();

    let min_dist = dists[neighbor_positions[0]];
    let max_log = -min_dist * min_dist / (2.0 * theta1);
    if max_log < f64::MIN_POSITIVE.ln() {
        return Err(Error::DegenerateKernel { theta1, min_dist });
    }

    // Normalize in log space against the in-neighborhood maximum; members
    // outside the neighborhood are exactly zero by definition.
    let mut omega = vec![0.0; candidates.len()];
    let mut total = 0.0;
    for &p in &neighbor_positions {
        let w = (-dists[p] * dists[p] / (2.0 * theta1) - max_log).exp();
        omega[p] = w;
        total += w;
    }
    for w in &mut omega {
        *w /= total;
    }
    Ok(WeightVector { candidates: candidates.to_vec(), omega, neighbor_positions })
}

/// Cache key: one entry per embedding length (and per eigenmap neighbor
/// count when the reduction is an eigenmap grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub k_nn: Option<usize>,
    pub q: usize,
}

/// Pairwise distances (and fitted scalings) among the cached candidates,
/// plus per-target candidate orderings so neighborhood lookups are O(m).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEntry {
    pub dist: DMatrix<f64>,
    pub theta2: DMatrix<f64>,
    /// `order[i]` lists training candidate positions `j != i` sorted by
    /// `(dist[i][j], response index)`.
    pub order: Vec<Vec<usize>>,
}

/// Exhaustive Procrustes distances over the `q` grid (and eigenmap grid),
/// immutable after construction and safe to share across chains.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCache {
    /// Response indices covered, ascending; training candidates first.
    pub candidates: Vec<usize>,
    /// How many leading `candidates` are training periods (analog pool).
    pub n_training: usize,
    pub mode: ProcrustesMode,
    entries: BTreeMap<CacheKey, DistanceEntry>,
}

/// Coefficient series feeding the cache: a single EOF series or one series
/// per eigenmap neighbor count.
pub enum CoefficientSource<'a> {
    Single(&'a ForcingCoefficients),
    PerKnn(&'a BTreeMap<usize, ForcingCoefficients>),
}

impl DistanceCache {
    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    pub fn entry(&self, key: &CacheKey) -> Result<&DistanceEntry> {
        self.entries.get(key).ok_or_else(|| {
            Error::Domain(format!("no cache entry for q={} k_nn={:?}", key.q, key.k_nn))
        })
    }

    pub fn position_of(&self, response_index: usize) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&c| c == response_index)
            .ok_or_else(|| Error::Domain(format!("response index {response_index} not cached")))
    }

    /// Kernel weights for a cached target under `(key, m, theta1)`.
    ///
    /// Candidates are all training periods other than the target itself.
    pub fn weights(
        &self,
        key: &CacheKey,
        target_position: usize,
        m: usize,
        theta1: f64,
    ) -> Result<WeightVector> {
        let entry = self.entry(key)?;
        let row = entry.dist.row(target_position);
        let positions = &entry.order[target_position];
        let candidates: Vec<usize> = positions.iter().map(|&p| self.candidates[p]).collect();
        let dists: Vec<f64> = positions.iter().map(|&p| row[p]).collect();
        kernel_weights(&candidates, &dists, m, theta1)
    }

    /// Persist as one matrix file pair per key plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CacheMeta {
            candidates: self.candidates.clone(),
            n_training: self.n_training,
            mode: self.mode,
            keys: self.entries.keys().copied().collect(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Numerical(format!("cache manifest serialization: {e}")))?;
        std::fs::create_dir_all(dir)
            .map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        std::fs::write(dir.join("cache.json"), json)
            .map_err(|source| Error::Io { path: dir.join("cache.json"), source })?;
        for (key, entry) in &self.entries {
            io::write_matrix(&dir.join(key_file(key, "dist")), &entry.dist)?;
            io::write_matrix(&dir.join(key_file(key, "theta2")), &entry.theta2)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("cache.json");
        let json = std::fs::read_to_string(&meta_path)
            .map_err(|source| Error::Io { path: meta_path.clone(), source })?;
        let meta: CacheMeta = serde_json::from_str(&json)
            .map_err(|e| Error::Parse { path: meta_path, line: 0, message: e.to_string() })?;
        let mut entries = BTreeMap::new();
        for key in &meta.keys {
            let dist = io::read_matrix(&dir.join(key_file(key, "dist")))?;
            let theta2 = io::read_matrix(&dir.join(key_file(key, "theta2")))?;
            let order = candidate_orders(&dist, &meta.candidates, meta.n_training);
            entries.insert(*key, DistanceEntry { dist, theta2, order });
        }
        Ok(DistanceCache {
            candidates: meta.candidates,
            n_training: meta.n_training,
            mode: meta.mode,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    candidates: Vec<usize>,
    n_training: usize,
    mode: ProcrustesMode,
    keys: Vec<CacheKey>,
}

fn key_file(key: &CacheKey, kind: &str) -> String {
    let mut name = String::new();
    write!(name, "q{:03}", key.q).unwrap();
    if let Some(k) = key.k_nn {
        write!(name, "_k{k:03}").unwrap();
    }
    write!(name, ".{kind}.tsv").unwrap();
    name
}

fn candidate_orders(dist: &DMatrix<f64>, candidates: &[usize], n_training: usize) -> Vec<Vec<usize>> {
    (0..candidates.len())
        .map(|i| {
            let mut order: Vec<usize> = (0..n_training).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                dist[(i, a)]
                    .partial_cmp(&dist[(i, b)])
                    .unwrap()
                    .then(candidates[a].cmp(&candidates[b]))
            });
            order
        })
        .collect()
}

/// Build the exhaustive distance cache.
///
/// `candidates` holds training response indices (the analog pool) followed
/// optionally by one forecast target index; `n_training` marks the split.
/// Every candidate must have enough forcing history for the largest `q`.
pub fn build_distance_cache(
    source: CoefficientSource<'_>,
    align: &TimeAlignment,
    q_range: (usize, usize),
    candidates: Vec<usize>,
    n_training: usize,
    mode: ProcrustesMode,
) -> Result<DistanceCache> {
    let (q_min, q_max) = q_range;
    if q_min == 0 || q_min > q_max {
        return Err(Error::Domain(format!("invalid q range [{q_min}, {q_max}]")));
    }
    if n_training == 0 || n_training > candidates.len() {
        return Err(Error::Domain("cache needs at least one training candidate".into()));
    }

    let keys: Vec<(CacheKey, &ForcingCoefficients)> = match source {
        CoefficientSource::Single(coeffs) => (q_min..=q_max)
            .map(|q| (CacheKey { k_nn: None, q }, coeffs))
            .collect(),
        CoefficientSource::PerKnn(map) => {
            if map.is_empty() {
                return Err(Error::Domain("empty eigenmap grid".into()));
            }
            map.iter()
                .flat_map(|(&k_nn, coeffs)| {
                    (q_min..=q_max).map(move |q| (CacheKey { k_nn: Some(k_nn), q }, coeffs))
                })
                .collect()
        }
    };

    // Fail fast if any candidate lacks history at the deepest lag.
    for (_, coeffs) in keys.iter().take(1) {
        for &c in &candidates {
            build_embedding(coeffs, c, q_max, align)?;
        }
    }

    let built: Result<Vec<(CacheKey, DistanceEntry)>> = keys
        .into_par_iter()
        .map(|(key, coeffs)| {
            let embeddings: Vec<EmbeddingMatrix> = candidates
                .iter()
                .map(|&c| build_embedding(coeffs, c, key.q, align))
                .collect::<Result<_>>()?;
            let n = embeddings.len();
            let mut dist = DMatrix::zeros(n, n);
            let mut theta2 = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        theta2[(i, j)] = 1.0;
                        continue;
                    }
                    let r = procrustes_distance(&embeddings[i].a, &embeddings[j].a, mode)?;
                    dist[(i, j)] = r.distance;
                    theta2[(i, j)] = r.scaling;
                }
            }
            let order = candidate_orders(&dist, &candidates, n_training);
            Ok((key, DistanceEntry { dist, theta2, order }))
        })
        .collect();

    Ok(DistanceCache {
        candidates,
        n_training,
        mode,
        entries: built?.into_iter().collect(),
    })
}
