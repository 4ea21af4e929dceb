//! Small dense linear-algebra utilities: power iteration for spectral norms
//! and a Cholesky solver for the symmetric positive-definite systems that
//! appear in the reconstruction-layer gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Largest eigenvalue of `DᵀD` by power iteration on the Gram operator,
/// to relative tolerance `tol` on the eigenvalue estimate.
///
/// The start vector is all-ones; for the random matrices used here it is
/// never orthogonal to the top eigenvector.
pub fn gram_spectral_max(d: ArrayView2<f64>, tol: f64) -> Result<f64> {
    let n = d.ncols();
    if n == 0 {
        return Err(Error::Domain("empty matrix in power iteration".into()));
    }
    let mut v = Array1::<f64>::ones(n);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);

    let mut lambda = 0.0f64;
    for _ in 0..100_000 {
        // w = Dᵀ(Dv), never forming DᵀD
        let dv = d.dot(&v);
        let mut w = d.t().dot(&dv);
        let new_lambda = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        w.mapv_inplace(|x| x / norm);
        let converged = (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1.0);
        v = w;
        lambda = new_lambda;
        if converged {
            return Ok(lambda);
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge to tol {tol:e} (last estimate {lambda:e})"
    )))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factor `a = L Lᵀ`. Fails if a pivot is not strictly positive.
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Domain(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::Numeric(format!(
                            "cholesky pivot {i} not positive ({sum:e})"
                        )));
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b` via the factor.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut y = b.to_owned();
        // forward: L y = b
        for i in 0..n {
            let mut sum = y[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= self.l[(k, i)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        y
    }

    /// Condition-number estimate of the factored matrix: power iteration for
    /// the largest eigenvalue, inverse iteration through the factor for the
    /// smallest. A handful of iterations is plenty for a guard threshold.
    pub fn condition_estimate(&self, a: &Array2<f64>) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 1.0;
        }
        if n == 1 {
            return 1.0;
        }
        let mut v = Array1::<f64>::ones(n);
        let mut lambda_max = 0.0f64;
        for _ in 0..50 {
            let mut w = a.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return f64::INFINITY;
            }
            w.mapv_inplace(|x| x / norm);
            lambda_max = w.dot(&a.dot(&w));
            v = w;
        }
        let mut u = Array1::<f64>::ones(n);
        let mut lambda_min = lambda_max;
        for _ in 0..50 {
            let mut w = self.solve(u.view());
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return f64::INFINITY;
            }
            w.mapv_inplace(|x| x / norm);
            lambda_min = w.dot(&a.dot(&w));
            u = w;
        }
        if lambda_min <= 0.0 {
            f64::INFINITY
        } else {
            lambda_max / lambda_min
        }
    }
}
