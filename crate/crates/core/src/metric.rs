//! Dictionaries, the metric they induce, and the parameter blocks shared by
//! the prox solvers and the network layers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Cholesky};

fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Synthesis dictionary `D` (m × k) with strong-convexity weight `alpha` and
/// linear term `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    d_mat: Array2<f64>,
    alpha: f64,
    linear: Array1<f64>,
}

impl Dictionary {
    pub fn new(d_mat: Array2<f64>, alpha: f64, linear: Array1<f64>) -> Result<Self> {
        check_finite("dictionary", d_mat.iter())?;
        check_finite("dictionary linear term", linear.iter())?;
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        if linear.len() != d_mat.ncols() {
            return Err(Error::Shape(format!(
                "linear term has length {}, dictionary has {} atoms",
                linear.len(),
                d_mat.ncols()
            )));
        }
        Ok(Self { d_mat, alpha, linear })
    }

    /// Dictionary with `d = 0`.
    pub fn with_zero_linear(d_mat: Array2<f64>, alpha: f64) -> Result<Self> {
        let k = d_mat.ncols();
        Self::new(d_mat, alpha, Array1::zeros(k))
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.d_mat
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn linear(&self) -> &Array1<f64> {
        &self.linear
    }

    /// Signal dimension `m`.
    pub fn signal_dim(&self) -> usize {
        self.d_mat.nrows()
    }

    /// Code dimension `k`.
    pub fn code_dim(&self) -> usize {
        self.d_mat.ncols()
    }
}

/// Symmetric positive-definite matrix defining the prox metric.
#[derive(Debug, Clone, PartialEq)]
pub struct QMetric {
    q: Array2<f64>,
}

impl QMetric {
    /// Symmetrizes `q` and checks that it is positive definite.
    pub fn new(q: Array2<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::Shape(format!(
                "metric must be square, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        check_finite("metric", q.iter())?;
        let q = symmetrize(&q);
        if let Some((i, v)) = q.diag().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "metric diagonal entry {i} is {v}, must be positive"
            )));
        }
        Cholesky::new(q.view())?;
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn cholesky(&self) -> Cholesky {
        Cholesky::new(self.q.view()).expect("QMetric is positive definite by construction")
    }
}

/// Elastic-net weights: `lambda` on the ℓ1 term and `beta` on the quadratic term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    lambda: f64,
    beta: f64,
}

impl Regularizer {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda and beta must be positive, got lambda={lambda}, beta={beta}"
            )));
        }
        Ok(Self { lambda, beta })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for Regularizer {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            beta: 0.01,
        }
    }
}

/// Affine map `x ↦ W x − c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub(crate) w: Array2<f64>,
    pub(crate) c: Array1<f64>,
}

impl AffineTransform {
    pub fn new(w: Array2<f64>, c: Array1<f64>) -> Result<Self> {
        check_finite("transform weights", w.iter())?;
        check_finite("transform offset", c.iter())?;
        if c.len() != w.nrows() {
            return Err(Error::Shape(format!(
                "offset length {} does not match {} output rows",
                c.len(),
                w.nrows()
            )));
        }
        Ok(Self { w, c })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn offset(&self) -> &Array1<f64> {
        &self.c
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Applies the map to every column of `x`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.w.dot(&x);
        z -= &self.c.view().insert_axis(Axis(1));
        z
    }

    pub fn apply_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) - &self.c
    }
}

/// Parameters of the recurrent prox iteration
/// `U ← ReLU(h ⊙ Z + W̃ (U − Z) − b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub(crate) wt: Array2<f64>,
    pub(crate) h: Array1<f64>,
    pub(crate) b: Array1<f64>,
    pub(crate) tt_max: usize,
}

impl RnnCell {
    /// Builds a cell, rejecting parameters outside the constraint sets
    /// (zero diagonal, `h ∈ [0,1]^k`, `b ≥ 0`).
    pub fn new(wt: Array2<f64>, h: Array1<f64>, b: Array1<f64>, tt_max: usize) -> Result<Self> {
        let k = h.len();
        if wt.dim() != (k, k) || b.len() != k {
            return Err(Error::Shape(format!(
                "cell needs W̃ {k}x{k} and b of length {k}, got W̃ {:?} and b of length {}",
                wt.dim(),
                b.len()
            )));
        }
        if tt_max == 0 {
            return Err(Error::InvalidParameter("tt_max must be at least 1".into()));
        }
        check_finite("cell coupling", wt.iter())?;
        check_finite("cell gain", h.iter())?;
        check_finite("cell threshold", b.iter())?;
        let cell = Self { wt, h, b, tt_max };
        if !cell.is_feasible() {
            return Err(Error::InvalidParameter(
                "cell violates its constraints (diag(W̃) = 0, 0 ≤ h ≤ 1, b ≥ 0)".into(),
            ));
        }
        Ok(cell)
    }

    /// Cell with no coupling, constant gain and constant threshold.
    pub fn separable(k: usize, h: f64, b: f64, tt_max: usize) -> Result<Self> {
        Self::new(
            Array2::zeros((k, k)),
            Array1::from_elem(k, h),
            Array1::from_elem(k, b),
            tt_max,
        )
    }

    pub fn coupling(&self) -> &Array2<f64> {
        &self.wt
    }

    pub fn gain(&self) -> &Array1<f64> {
        &self.h
    }

    pub fn threshold(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn tt_max(&self) -> usize {
        self.tt_max
    }

    pub fn set_tt_max(&mut self, tt_max: usize) {
        assert!(tt_max >= 1, "tt_max must be at least 1");
        self.tt_max = tt_max;
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn is_feasible(&self) -> bool {
        self.wt.diag().iter().all(|&v| v == 0.0)
            && self.h.iter().all(|&v| (0.0..=1.0).contains(&v))
            && self.b.iter().all(|&v| v >= 0.0)
    }

    /// Projects onto the constraint sets: zero diagonal, box `[0,1]` for the
    /// gain, nonnegative orthant for the threshold.
    pub fn project(&mut self) {
        self.wt.diag_mut().fill(0.0);
        self.h.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self.b.mapv_inplace(|v| v.max(0.0));
    }
}

/// `Q = DᵀD + αI`, symmetrized after the product.
pub fn metric_from_dictionary(dict: &Dictionary) -> Result<QMetric> {
    let d = dict.atoms();
    let mut q = d.t().dot(d);
    q.diag_mut().mapv_inplace(|v| v + dict.alpha());
    QMetric::new(q)
}

/// Returns `(F, c)` with `F = Q⁻¹Dᵀ` and `c = Q⁻¹d` packed as an affine map,
/// together with `Q`.
pub fn transform_from_dictionary(dict: &Dictionary) -> Result<(AffineTransform, QMetric)> {
    let q = metric_from_dictionary(dict)?;
    let chol = Cholesky::new(q.matrix().view())?;
    let f = chol.solve_mat(dict.atoms().t());
    let c = chol.solve_vec(dict.linear().view());
    Ok((AffineTransform::new(f, c)?, q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdReport {
    pub symmetry_defect: f64,
    pub min_diagonal: f64,
    pub factorization_ok: bool,
}

impl SpdReport {
    pub fn is_spd(&self) -> bool {
        self.symmetry_defect == 0.0 && self.min_diagonal > 0.0 && self.factorization_ok
    }
}

/// Diagnostic on an arbitrary square matrix; never fails.
pub fn validate_spd(q: ArrayView2<f64>) -> SpdReport {
    let n = q.nrows().min(q.ncols());
    let mut symmetry_defect = 0.0f64;
    for i in 0..n {
        for l in 0..n {
            symmetry_defect = symmetry_defect.max((q[[i, l]] - q[[l, i]]).abs());
        }
    }
    let min_diagonal = q.diag().iter().copied().fold(f64::INFINITY, f64::min);
    let factorization_ok = q.nrows() == q.ncols() && Cholesky::new(q).is_ok();
    SpdReport {
        symmetry_defect,
        min_diagonal,
        factorization_ok,
    }
}
