//! Dense linear-algebra and sampling helpers shared by the sampler, the
//! simulator and Kriging.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Relative diagonal jitter applied once to a matrix that fails Cholesky.
pub const JITTER_REL: f64 = 1e-8;

/// Cholesky factorization with a single bounded rescue: on failure add
/// `1e-8 * trace / n` to the diagonal and try again, then give up.
pub fn cholesky_jitter(m: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 {
        return Err(Error::not_pd(format!("{context}: empty matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::not_pd(format!("{context}: non-finite entries")));
    }
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let jitter = JITTER_REL * m.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
            warn!("{context}: Cholesky failed, retrying with diagonal jitter {jitter:.3e}");
            let mut m = m;
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            Cholesky::new(m).ok_or_else(|| Error::not_pd(context))
        }
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw from IG(shape, rate), i.e. the reciprocal of Gamma(shape, rate).
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0, "IG({shape}, {rate})");
    let g = Gamma::new(shape, 1.0 / rate).expect("gamma parameters checked by caller");
    1.0 / g.sample(rng)
}

/// Draw from N(P^{-1} b, P^{-1}) given the Cholesky factor of the precision P.
pub fn sample_from_precision<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    linear: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(linear);
    let z = standard_normal_vec(mean.len(), rng);
    // P = L L^T, so L^{-T} z has covariance P^{-1}.
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + noise
}

/// Quadratic form `x^T A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Eigen-factored symmetric positive definite matrix.
///
/// Correlation matrices are fixed for a whole chain, so they are decomposed
/// once; every per-day latent update with a precision of the form
/// `a I + b A^{-1}` then costs two matrix-vector products.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    pub matrix: DMatrix<f64>,
    pub eigvecs: DMatrix<f64>,
    pub eigvals: DVector<f64>,
    pub inverse: DMatrix<f64>,
    /// Symmetric square root `Q Λ^{1/2} Q^T`, used to draw N(0, A).
    pub sqrt: DMatrix<f64>,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>, context: &str) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::not_pd(format!("{context}: empty or non-finite")));
        }
        let eig = SymmetricEigen::new(matrix.clone());
        let mut eigvals = eig.eigenvalues;
        let floor = JITTER_REL * matrix.trace() / n as f64;
        let min = eigvals.min();
        if min <= floor {
            if min < -1e-6 * matrix.trace() / n as f64 {
                return Err(Error::not_pd(context));
            }
            warn!("{context}: smallest eigenvalue {min:.3e} floored to {floor:.3e}");
            eigvals.iter_mut().for_each(|v| *v = v.max(floor));
        }
        let q = eig.eigenvectors;
        let inv_diag = DMatrix::from_diagonal(&eigvals.map(|v| 1.0 / v));
        let sqrt_diag = DMatrix::from_diagonal(&eigvals.map(f64::sqrt));
        let inverse = &q * inv_diag * q.transpose();
        let sqrt = &q * sqrt_diag * q.transpose();
        Ok(Self {
            matrix,
            eigvecs: q,
            eigvals,
            inverse,
            sqrt,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// Draw from `N(mean, (a I + b A^{-1})^{-1})` where the mean is the solve
    /// against `linear`. Requires `a >= 0`, `b > 0`.
    pub fn sample_shifted<R: Rng + ?Sized>(
        &self,
        a: f64,
        b: f64,
        linear: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        let q = &self.eigvecs;
        let d = self.eigvals.map(|l| a + b / l);
        let proj = q.transpose() * linear;
        let z = standard_normal_vec(d.len(), rng);
        let coef = DVector::from_iterator(
            d.len(),
            d.iter()
                .zip(proj.iter())
                .zip(z.iter())
                .map(|((di, pi), zi)| pi / di + zi / di.sqrt()),
        );
        q * coef
    }
}

/// Solve the weighted least-squares problem `min Σ w (y - X b)^2` by normal
/// equations with a Cholesky factorization. Returns `None` when `X^T W X`
/// is singular.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for (i, row) in x.row_iter().enumerate() {
        let wi = w[i];
        for a in 0..p {
            xtwy[a] += wi * row[a] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    Cholesky::new(xtwx).map(|c| c.solve(&xtwy))
}
