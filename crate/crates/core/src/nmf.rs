//! Nonnegative matrix factorization of the count matrix.
//!
//! The count matrix is approximated as `Y ~ Psi * B (+ offset * 1')` with all
//! factors nonnegative, so reconstructed intensities keep the support count
//! data needs. Starting values come from the deterministic NNSVD scheme
//! (splitting the leading singular vectors into their positive and negative
//! parts), which removes run-to-run nondeterminism from the otherwise
//! non-unique factorization. Fitting uses multiplicative updates for the
//! Frobenius loss, extended with a common per-location offset column that
//! absorbs the shared baseline across sparse count columns.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io;

/// Multiplicative-update denominator guard; keeps exact zeros absorbing
/// (0/eps = 0) without ever dividing by zero.
const DIV_EPS: f64 = 1e-16;

/// Fraction of the data mean used to replace exact zeros in the NNSVD
/// initialization, since zeros are absorbing under multiplicative updates.
const ZERO_FILL_FRACTION: f64 = 1e-4;

/// A fitted nonnegative factorization `Y ~ psi * b + offset * 1'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// Basis, `n_y x n_beta`, nonnegative.
    pub psi: DMatrix<f64>,
    /// Coefficients, `n_beta x T`, nonnegative.
    pub b: DMatrix<f64>,
    /// Common baseline per location; all zeros when the offset is disabled.
    pub offset: DVector<f64>,
    /// Frobenius loss after each sweep, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

impl Factorization {
    pub fn n_basis(&self) -> usize {
        self.psi.ncols()
    }

    /// Reconstructed intensity for one coefficient vector:
    /// `lambda = psi * beta + offset`.
    pub fn reconstruct(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != self.psi.ncols() {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, basis expects {}",
                beta.len(),
                self.psi.ncols()
            )));
        }
        Ok(&self.psi * beta + &self.offset)
    }

    /// Serialize to the delimited-matrix cache format under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_matrix(&dir.join("psi.tsv"), &self.psi)?;
        io::write_matrix(&dir.join("b.tsv"), &self.b)?;
        io::write_matrix(
            &dir.join("offset.tsv"),
            &DMatrix::from_column_slice(self.offset.len(), 1, self.offset.as_slice()),
        )?;
        let trace = DMatrix::from_column_slice(self.loss_trace.len(), 1, &self.loss_trace);
        io::write_matrix(&dir.join("loss_trace.tsv"), &trace)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let psi = io::read_matrix(&dir.join("psi.tsv"))?;
        let b = io::read_matrix(&dir.join("b.tsv"))?;
        let offset_m = io::read_matrix(&dir.join("offset.tsv"))?;
        let trace_m = io::read_matrix(&dir.join("loss_trace.tsv"))?;
        if psi.ncols() != b.nrows() || offset_m.nrows() != psi.nrows() {
            return Err(Error::Dimension("inconsistent factorization cache".into()));
        }
        Ok(Factorization {
            offset: DVector::from_column_slice(offset_m.column(0).as_slice()),
            loss_trace: trace_m.column(0).iter().copied().collect(),
            psi,
            b,
        })
    }
}

fn check_nonnegative(y: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some((idx, _)) = y.iter().enumerate().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
        let (r, c) = (idx % y.nrows(), idx / y.nrows());
        return Err(Error::Domain(format!(
            "{what} has an invalid entry at ({r}, {c}); nonnegative finite values required"
        )));
    }
    Ok(())
}

/// NNSVD starting values from the leading `k` singular triplets.
///
/// Each singular vector pair is split into positive and negative parts; the
/// pair with the larger norm product is kept and scaled by `sqrt(sigma_i)`.
/// Exact zeros are then replaced by `mean(y) * 1e-4` so multiplicative
/// updates can still move them.
pub fn nnsvd_init(y: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_nonnegative(y, "nnsvd input")?;
    let (n, t) = (y.nrows(), y.ncols());
    if k == 0 || k > n.min(t) {
        return Err(Error::Domain(format!("rank {k} out of range 1..={}", n.min(t))));
    }
    let svd = y.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD produced no U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD produced no V".into()))?;

    let mut psi = DMatrix::zeros(n, k);
    let mut b = DMatrix::zeros(k, t);
    for j in 0..k {
        let sigma = svd.singular_values[j];
        let uj = u.column(j);
        let vj = v_t.row(j);

        let up: DVector<f64> = DVector::from_fn(n, |i, _| uj[i].max(0.0));
        let un: DVector<f64> = DVector::from_fn(n, |i, _| (-uj[i]).max(0.0));
        let vp: DVector<f64> = DVector::from_fn(t, |i, _| vj[i].max(0.0));
        let vn: DVector<f64> = DVector::from_fn(t, |i, _| (-vj[i]).max(0.0));

        let (nup, nun, nvp, nvn) = (up.norm(), un.norm(), vp.norm(), vn.norm());
        let term_pos = nup * nvp;
        let term_neg = nun * nvn;

        let (uu, vv, term, nu, nv) = if term_pos >= term_neg {
            (up, vp, term_pos, nup, nvp)
        } else {
            (un, vn, term_neg, nun, nvn)
        };
        if term <= 0.0 || nu == 0.0 || nv == 0.0 {
            // Both split pairs vanished (possible past the numerical rank);
            // leave the column for the zero fill below.
            continue;
        }
        let scale = (sigma * term).sqrt();
        for i in 0..n {
            psi[(i, j)] = scale * uu[i] / nu;
        }
        for i in 0..t {
            b[(j, i)] = scale * vv[i] / nv;
        }
    }

    let fill = y.mean() * ZERO_FILL_FRACTION;
    let fill = if fill > 0.0 { fill } else { ZERO_FILL_FRACTION };
    psi.iter_mut().chain(b.iter_mut()).for_each(|v| {
        if *v == 0.0 {
            *v = fill;
        }
    });
    Ok((psi, b))
}

/// Options for [`fit_offset_nmf`].
#[derive(Debug, Clone, Copy)]
pub struct NmfOptions {
    pub max_iter: usize,
    /// Relative loss-change stopping tolerance.
    pub tol: f64,
    /// Fit the common offset column; when false the offset stays zero.
    pub offset: bool,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions { max_iter: 2000, tol: 1e-8, offset: true }
    }
}

fn frobenius_loss(y: &DMatrix<f64>, model: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for (a, b) in y.iter().zip(model.iter()) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

fn model_matrix(psi: &DMatrix<f64>, b: &DMatrix<f64>, offset: &DVector<f64>) -> DMatrix<f64> {
    let mut m = psi * b;
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            m[(r, c)] += offset[r];
        }
    }
    m
}

fn multiplicative_update(base: &mut DMatrix<f64>, numer: &DMatrix<f64>, denom: &DMatrix<f64>) {
    base.zip_zip_apply(numer, denom, |b, n, d| {
        *b *= n / (d + DIV_EPS);
    });
}

/// Minimize `||Y - Psi B - offset 1'||_F^2` over nonnegative factors with
/// multiplicative updates, starting from `init` and a given offset start.
///
/// Stops after `max_iter` sweeps or when the relative loss change drops
/// below `tol`. The recorded loss trace is non-increasing; a non-finite
/// factor aborts with the failing iteration.
pub fn fit_offset_nmf_from(
    y: &DMatrix<f64>,
    init: (DMatrix<f64>, DMatrix<f64>),
    offset_init: DVector<f64>,
    opts: &NmfOptions,
) -> Result<Factorization> {
    check_nonnegative(y, "nmf input")?;
    let (mut psi, mut b) = init;
    check_nonnegative(&psi, "psi init")?;
    check_nonnegative(&b, "b init")?;
    if psi.nrows() != y.nrows() || b.ncols() != y.ncols() || psi.ncols() != b.nrows() {
        return Err(Error::Dimension(format!(
            "init shapes ({}x{}, {}x{}) do not factor a {}x{} matrix",
            psi.nrows(),
            psi.ncols(),
            b.nrows(),
            b.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let mut offset = offset_init;
    if offset.len() != y.nrows() {
        return Err(Error::Dimension("offset length mismatch".into()));
    }

    let mut loss_trace = Vec::with_capacity(opts.max_iter + 1);
    let mut loss = frobenius_loss(y, &model_matrix(&psi, &b, &offset));
    loss_trace.push(loss);

    for iter in 0..opts.max_iter {
        let model = model_matrix(&psi, &b, &offset);
        let numer = y * b.transpose();
        let denom = &model * b.transpose();
        multiplicative_update(&mut psi, &numer, &denom);

        let model = model_matrix(&psi, &b, &offset);
        let numer = psi.transpose() * y;
        let denom = psi.transpose() * &model;
        multiplicative_update(&mut b, &numer, &denom);

        if opts.offset {
            let model = model_matrix(&psi, &b, &offset);
            let numer = y.column_sum();
            let denom = model.column_sum();
            for i in 0..offset.len() {
                offset[i] *= numer[i] / (denom[i] + DIV_EPS);
            }
        }

        let new_loss = frobenius_loss(y, &model_matrix(&psi, &b, &offset));
        if !new_loss.is_finite()
            || psi.iter().any(|v| !v.is_finite())
            || b.iter().any(|v| !v.is_finite())
            || offset.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "offset NMF diverged (non-finite factor) at iteration {iter}"
            )));
        }
        loss_trace.push(new_loss);
        let rel_change = (loss - new_loss).abs() / loss.max(f64::MIN_POSITIVE);
        loss = new_loss;
        if rel_change < opts.tol {
            break;
        }
    }

    Ok(Factorization { psi, b, offset, loss_trace })
}

/// [`fit_offset_nmf_from`] with a zero offset start (the offset stays zero
/// when `opts.offset` is false, matching the plain NMF objective).
pub fn fit_offset_nmf(
    y: &DMatrix<f64>,
    init: (DMatrix<f64>, DMatrix<f64>),
    opts: &NmfOptions,
) -> Result<Factorization> {
    let offset_init = if opts.offset {
        // A zero start would be absorbing under the multiplicative update.
        let fill = (y.mean() * ZERO_FILL_FRACTION).max(ZERO_FILL_FRACTION);
        DVector::from_element(y.nrows(), fill)
    } else {
        DVector::zeros(y.nrows())
    };
    fit_offset_nmf_from(y, init, offset_init, opts)
}

/// NNSVD initialization followed by the offset-NMF fit; the usual entry
/// point for the pipeline.
pub fn fit(y: &DMatrix<f64>, k: usize, opts: &NmfOptions) -> Result<Factorization> {
    fit_offset_nmf(y, nnsvd_init(y, k)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_nonneg(rng: &mut ChaCha8Rng, n: usize, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, t, |_, _| rng.random::<f64>() * 5.0)
    }

    #[test]
    fn nnsvd_rank_one_recovers_factors() {
        // y = psi b' with nonnegative rank-1 factors: the leading singular
        // vectors of a nonnegative rank-1 matrix are nonnegative, so the
        // initialization is proportional to the truth.
        let psi = DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0]);
        let b = DVector::from_vec(vec![0.2, 1.5, 0.9]);
        let y = &psi * b.transpose();
        let (p0, b0) = nnsvd_init(&y, 1).unwrap();

        let cos_p = p0.column(0).dot(&psi) / (p0.column(0).norm() * psi.norm());
        let cos_b = b0.row(0).transpose().dot(&b) / (b0.row(0).norm() * b.norm());
        assert!(cos_p > 1.0 - 1e-10, "{cos_p}");
        assert!(cos_b > 1.0 - 1e-10, "{cos_b}");
    }

    #[test]
    fn nnsvd_identity_matches_direct_svd_oracle() {
        let y = DMatrix::<f64>::identity(4, 4);
        let (p0, b0) = nnsvd_init(&y, 2).unwrap();

        // Oracle: apply the split rule to the raw SVD triplets by hand.
        let svd = y.clone().svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let fill = y.mean() * 1e-4;
        for j in 0..2 {
            let sigma = svd.singular_values[j];
            let uj: Vec<f64> = u.column(j).iter().copied().collect();
            let vj: Vec<f64> = v_t.row(j).iter().copied().collect();
            let pos = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.max(0.0)).collect() };
            let neg = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (-x).max(0.0)).collect() };
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (up, un, vp, vn) = (pos(&uj), neg(&uj), pos(&vj), neg(&vj));
            let (tp, tn) = (norm(&up) * norm(&vp), norm(&un) * norm(&vn));
            let (uu, vv, term) = if tp >= tn { (up, vp, tp) } else { (un, vn, tn) };
            let (nu, nv) = (norm(&uu), norm(&vv));
            for i in 0..4 {
                let expect = (sigma * term).sqrt() * uu[i] / nu;
                let expect = if expect == 0.0 { fill } else { expect };
                assert!((p0[(i, j)] - expect).abs() < 1e-12);
            }
            for i in 0..4 {
                let expect = (sigma * term).sqrt() * vv[i] / nv;
                let expect = if expect == 0.0 { fill } else { expect };
                assert!((b0[(j, i)] - expect).abs() < 1e-12);
            }
        }

        // Each column is a scaled standard basis vector up to the zero fill.
        for j in 0..2 {
            let col = p0.column(j);
            let big: Vec<usize> = (0..4).filter(|&i| col[i] > 0.5).collect();
            assert_eq!(big.len(), 1, "column {j} not basis-like: {col:?}");
        }
    }

    #[test]
    fn nnsvd_always_nonnegative() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_nonneg(&mut rng, 10, 8);
            let (p0, b0) = nnsvd_init(&y, 3).unwrap();
            assert!(p0.iter().all(|&v| v > 0.0));
            assert!(b0.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn nnsvd_rejects_bad_rank_and_negatives() {
        let y = DMatrix::from_element(3, 3, 1.0);
        assert!(nnsvd_init(&y, 0).is_err());
        assert!(nnsvd_init(&y, 4).is_err());
        let mut bad = y.clone();
        bad[(1, 2)] = -0.5;
        assert!(nnsvd_init(&bad, 2).is_err());
    }

    #[test]
    fn exact_factorization_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = DMatrix::from_fn(8, 3, |_, _| rng.random::<f64>() + 0.1);
        let b = DMatrix::from_fn(3, 6, |_, _| rng.random::<f64>() + 0.1);
        let y = &psi * &b;
        let opts = NmfOptions { max_iter: 50, tol: 0.0, offset: false };
        let f = fit_offset_nmf(&y, (psi, b), &opts).unwrap();
        let rel = f.loss_trace.last().unwrap() / y.iter().map(|v| v * v).sum::<f64>();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn constant_matrix_fits_via_offset() {
        let y = DMatrix::from_element(6, 9, 4.0);
        let opts = NmfOptions { max_iter: 5000, tol: 1e-14, offset: true };
        let with_offset = fit(&y, 1, &opts).unwrap();
        let rank1_only =
            fit_offset_nmf(&y, nnsvd_init(&y, 1).unwrap(), &NmfOptions { offset: false, ..opts })
                .unwrap();
        let final_with = *with_offset.loss_trace.last().unwrap();
        let final_without = *rank1_only.loss_trace.last().unwrap();
        assert!(final_with <= final_without + 1e-12);

        let recon = model_matrix(&with_offset.psi, &with_offset.b, &with_offset.offset);
        let rel = frobenius_loss(&y, &recon).sqrt() / y.norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn loss_trace_non_increasing_over_seeds() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_nonneg(&mut rng, 20, 15);
            let opts = NmfOptions { max_iter: 200, tol: 0.0, offset: seed % 2 == 0 };
            let f = fit_offset_nmf(&y, nnsvd_init(&y, 5).unwrap(), &opts).unwrap();
            for w in f.loss_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12 * w[0].max(1.0),
                    "seed {seed}: loss rose from {} to {}",
                    w[0],
                    w[1]
                );
            }
            assert!(f.psi.iter().all(|&v| v >= 0.0));
            assert!(f.b.iter().all(|&v| v >= 0.0));
            assert!(f.offset.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_nonneg(&mut rng, 12, 10);
        let opts = NmfOptions::default();
        let a = fit(&y, 4, &opts).unwrap();
        let b = fit(&y, 4, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruct_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = random_nonneg(&mut rng, 10, 7);
        let f = fit(&y, 3, &NmfOptions { max_iter: 100, ..Default::default() }).unwrap();

        // beta = 0 with zero offset gives zero intensity.
        let zero = Factorization { offset: DVector::zeros(10), ..f.clone() };
        let lam = zero.reconstruct(&DVector::zeros(3)).unwrap();
        assert!(lam.iter().all(|&v| v == 0.0));

        // Unit coefficient picks out one basis column plus the offset.
        let e1 = DVector::from_fn(3, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let lam = f.reconstruct(&e1).unwrap();
        for i in 0..10 {
            assert!((lam[i] - (f.psi[(i, 1)] + f.offset[i])).abs() < 1e-15);
        }

        // Random beta against an explicit loop oracle.
        let beta = DVector::from_fn(3, |_, _| rng.random::<f64>());
        let lam = f.reconstruct(&beta).unwrap();
        for i in 0..10 {
            let mut expect = f.offset[i];
            for j in 0..3 {
                expect += f.psi[(i, j)] * beta[j];
            }
            assert!((lam[i] - expect).abs() < 1e-12);
        }
        assert!(lam.iter().all(|&v| v >= 0.0));

        // Length mismatch is an error.
        assert!(f.reconstruct(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = random_nonneg(&mut rng, 6, 5);
        let f = fit(&y, 2, &NmfOptions { max_iter: 60, ..Default::default() }).unwrap();
        f.save(dir.path()).unwrap();
        let g = Factorization::load(dir.path()).unwrap();
        assert_eq!(f, g);
    }
}
