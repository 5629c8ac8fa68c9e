//! Central finite-difference verification of analytic gradients.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

use super::model::Model;
use super::signal::Signal;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` with `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` for every
/// coordinate `i`.
pub fn finite_diff_check(
    theta: &[f64],
    analytic: &[f64],
    epsilon: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "gradient length must match parameters");
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: theta.len(),
    };
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        let up = f(&probe);
        probe[i] = theta[i] - epsilon;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Fixed Gaussian matrix used to reduce a matrix output to a scalar.
pub fn projection(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

pub fn project(a: ArrayView2<f64>, r: ArrayView2<f64>) -> f64 {
    (&a * &r).sum()
}

/// Checks every model parameter against finite differences of
/// `⟨R, logits(θ)⟩` for a seeded projection `R`.
pub fn check_model(model: &Model, x: &Signal, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    let (logits, cache) = model.forward(x)?;
    let r = projection(logits.nrows(), logits.ncols(), seed);
    let analytic = model.backward(&cache, r.view())?.flatten();
    let theta = model.flat_parameters();
    let mut probe = model.clone();
    let mut failure = None;
    let report = finite_diff_check(&theta, &analytic, epsilon, |p| {
        probe.set_flat_parameters(p).expect("same parameter count");
        match probe.predict(x) {
            Ok(l) => project(l.view(), r.view()),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
