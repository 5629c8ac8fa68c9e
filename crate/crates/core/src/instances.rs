//! Seeded random problem instances shared by the CLI and the test suites.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::Result;
use crate::metric::{Dictionary, QMetric};

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Gaussian `m × k` dictionary with unit-norm columns and `d = 0`.
pub fn unit_norm_dictionary<R: Rng + ?Sized>(m: usize, k: usize, alpha: f64, rng: &mut R) -> Result<Dictionary> {
    let mut d = gaussian(m, k, rng);
    for mut col in d.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col /= norm;
        }
    }
    Dictionary::with_zero_linear(d, alpha)
}

/// `DᵀD + αI` for a Gaussian `m × k` dictionary with unit-norm columns.
pub fn random_dictionary_metric<R: Rng + ?Sized>(m: usize, k: usize, alpha: f64, rng: &mut R) -> Result<QMetric> {
    crate::metric::metric_from_dictionary(&unit_norm_dictionary(m, k, alpha, rng)?)
}

/// Symmetric matrix with off-diagonal entries uniform in `[-1, 1]` and
/// `q_ii = margin · Σ_{ℓ≠i} |q_iℓ| + 0.1`.
pub fn diagonally_dominant_metric<R: Rng + ?Sized>(k: usize, margin: f64, rng: &mut R) -> Result<QMetric> {
    let uni = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut q = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for l in (i + 1)..k {
            let v = uni.sample(rng);
            q[[i, l]] = v;
            q[[l, i]] = v;
        }
    }
    for i in 0..k {
        let off: f64 = (0..k).filter(|&l| l != i).map(|l| q[[i, l]].abs()).sum();
        q[[i, i]] = margin * off + 0.1;
    }
    QMetric::new(q)
}

pub fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}
