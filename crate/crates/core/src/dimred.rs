//! Forcing-field dimension reduction: EOFs (linear) and Laplacian eigenmaps
//! over time points (nonlinear), both producing a coefficient vector per
//! forcing period.
//!
//! The eigenmap treats each forcing period (a column of the anomaly matrix,
//! one point in location-space) as a graph node, connects k nearest
//! neighbors under Euclidean distance, symmetrizes by union, and solves the
//! generalized problem `L v = lambda D v` for the unnormalized Laplacian
//! `L = D - W`. Eigenvector signs are fixed deterministically so repeated
//! runs and cached artifacts are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Which reduction produced a coefficient series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReductionMethod {
    Eof,
    LaplacianEigenmap { k_nn: usize },
}

/// Coefficient series: one `n_alpha`-vector per forcing period.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingCoefficients {
    /// `n_alpha x T'`.
    pub alpha: DMatrix<f64>,
    pub method: ReductionMethod,
}

impl ForcingCoefficients {
    pub fn n_alpha(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_matrix(path, &self.alpha)
    }

    pub fn load(path: &Path, method: ReductionMethod) -> Result<Self> {
        Ok(ForcingCoefficients { alpha: io::read_matrix(path)?, method })
    }
}

/// EOF decomposition of an anomaly matrix.
#[derive(Debug, Clone)]
pub struct EofDecomposition {
    /// Orthonormal spatial basis, `n_x x n_alpha`.
    pub phi: DMatrix<f64>,
    pub coeffs: ForcingCoefficients,
    /// Fraction of total variance carried by each retained mode.
    pub var_explained: DVector<f64>,
}

/// Leading `n_alpha` EOFs of the anomaly matrix `x` (`n_x` locations by
/// `T'` periods): the left singular vectors, with projection coefficients
/// `alpha = phi' x` and per-mode variance fractions.
pub fn compute_eofs(x: &DMatrix<f64>, n_alpha: usize) -> Result<EofDecomposition> {
    let (n_x, t) = (x.nrows(), x.ncols());
    if n_alpha == 0 || n_alpha > n_x.min(t) {
        return Err(Error::Domain(format!(
            "n_alpha {n_alpha} out of range 1..={}",
            n_x.min(t)
        )));
    }
    let svd = x.clone().svd(true, true);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Numerical("SVD produced no U".into()))?;

    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::Numerical("anomaly matrix is identically zero".into()));
    }

    let mut phi = u.columns(0, n_alpha).into_owned();
    for j in 0..n_alpha {
        if should_flip(&phi.column(j).iter().copied().collect::<Vec<_>>()) {
            for i in 0..n_x {
                phi[(i, j)] = -phi[(i, j)];
            }
        }
    }
    let alpha = phi.transpose() * x;
    let var_explained =
        DVector::from_fn(n_alpha, |i, _| svd.singular_values[i].powi(2) / total);

    Ok(EofDecomposition {
        phi,
        coeffs: ForcingCoefficients { alpha, method: ReductionMethod::Eof },
        var_explained,
    })
}

/// Deterministic sign convention: flip so the largest-magnitude entry is
/// positive (first such entry on exact ties).
fn should_flip(v: &[f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    v[best] < 0.0
}

/// Symmetric union k-nearest-neighbor adjacency over the columns of `x`.
fn knn_adjacency(x: &DMatrix<f64>, k_nn: usize) -> DMatrix<f64> {
    let t = x.ncols();
    let mut d2 = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in (i + 1)..t {
            let diff = x.column(i) - x.column(j);
            let v = diff.norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    let mut w = DMatrix::zeros(t, t);
    for i in 0..t {
        let mut order: Vec<usize> = (0..t).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            d2[(i, a)]
                .partial_cmp(&d2[(i, b)])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k_nn) {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
    }
    w
}

/// Connected-component count of a binary adjacency matrix.
fn component_count(w: &DMatrix<f64>) -> usize {
    let t = w.nrows();
    let mut seen = vec![false; t];
    let mut components = 0;
    for start in 0..t {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..t {
                if w[(i, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components
}

/// Laplacian-eigenmap embedding of the forcing periods.
///
/// Coordinates are the generalized eigenvectors of `L v = lambda D v` for
/// the `n_alpha` smallest nonzero eigenvalues, solved through the symmetric
/// form `D^{-1/2} L D^{-1/2}`. A disconnected neighbor graph is an error:
/// distances across components would be meaningless.
pub fn laplacian_eigenmaps(
    x: &DMatrix<f64>,
    n_alpha: usize,
    k_nn: usize,
) -> Result<ForcingCoefficients> {
    let t = x.ncols();
    if k_nn == 0 || k_nn >= t {
        return Err(Error::Domain(format!("k_nn {k_nn} out of range 1..{t}")));
    }
    if n_alpha == 0 || n_alpha >= t {
        return Err(Error::Domain(format!("n_alpha {n_alpha} out of range 1..{t}")));
    }

    let w = knn_adjacency(x, k_nn);
    let components = component_count(&w);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components, k_nn });
    }

    let degrees: Vec<f64> = (0..t).map(|i| w.row(i).sum()).collect();
    let d_isqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    // L_sym = I - D^{-1/2} W D^{-1/2}, same eigenvalues as the generalized
    // problem, eigenvectors related by v = D^{-1/2} u.
    let mut l_sym = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..t {
            let off = -d_isqrt[i] * w[(i, j)] * d_isqrt[j];
            l_sym[(i, j)] = if i == j { 1.0 + off } else { off };
        }
    }
    // Exact symmetry despite rounding.
    for i in 0..t {
        for j in (i + 1)..t {
            let m = 0.5 * (l_sym[(i, j)] + l_sym[(j, i)]);
            l_sym[(i, j)] = m;
            l_sym[(j, i)] = m;
        }
    }

    let eig = SymmetricEigen::new(l_sym);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());

    // Connected graph: exactly one zero eigenvalue, skipped.
    let mut alpha = DMatrix::zeros(n_alpha, t);
    for (row, &idx) in order[1..=n_alpha].iter().enumerate() {
        let u = eig.eigenvectors.column(idx);
        let mut v: Vec<f64> = (0..t).map(|i| d_isqrt[i] * u[i]).collect();
        if should_flip(&v) {
            for e in &mut v {
                *e = -*e;
            }
        }
        for i in 0..t {
            alpha[(row, i)] = v[i];
        }
    }

    Ok(ForcingCoefficients {
        alpha,
        method: ReductionMethod::LaplacianEigenmap { k_nn },
    })
}

/// One eigenmap per grid value, with per-entry error isolation so a
/// disconnected graph at one `k_nn` does not poison the rest.
pub fn precompute_le_grid(
    x: &DMatrix<f64>,
    n_alpha: usize,
    grid: &[usize],
) -> BTreeMap<usize, Result<ForcingCoefficients>> {
    grid.iter()
        .map(|&k| (k, laplacian_eigenmaps(x, n_alpha, k)))
        .collect()
}
