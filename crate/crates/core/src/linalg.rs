//! Small dense linear-algebra kernels: Cholesky factorization, triangular
//! solves and power iteration.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix. Only the lower triangle of `a` is read.
    pub fn new(a: ArrayView2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for p in 0..j {
                diag -= l[[j, p]] * l[[j, p]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for p in 0..j {
                    s -= l[[i, p]] * l[[j, p]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.l
    }

    /// Solves `A x = rhs` by forward then backward substitution.
    pub fn solve_vec(&self, rhs: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n, "rhs length must match factor dimension");
        let l = &self.l;
        let mut y = rhs.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= l[[i, p]] * y[p];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in (i + 1)..n {
                s -= l[[p, i]] * y[p];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// Solves `A X = rhs` column by column.
    pub fn solve_mat(&self, rhs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(rhs.raw_dim());
        for (j, col) in rhs.axis_iter(Axis(1)).enumerate() {
            out.column_mut(j).assign(&self.solve_vec(col));
        }
        out
    }
}

/// Estimates the largest eigenvalue of a symmetric positive semidefinite
/// matrix with `steps` rounds of power iteration from a seeded Gaussian start.
pub fn power_iteration(a: ArrayView2<f64>, steps: usize, seed: u64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Array1<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut estimate = 0.0;
    for _ in 0..steps {
        let w = a.dot(&v);
        estimate = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    // Rayleigh quotient of the final iterate
    estimate.max(v.dot(&a.dot(&v)))
}

/// `(M + Mᵀ) / 2`
pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

pub fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
