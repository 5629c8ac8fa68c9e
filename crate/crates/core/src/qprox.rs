//! Proximity operator of the nonnegative elastic net in the metric induced
//! by `Q`:
//!
//! ```text
//! prox(Z) = argmin_U ½‖U − Z‖²_{F,Q} + λ‖U‖₁ + ι_{U ≥ 0} + (β/2)‖U‖²_F
//! ```
//!
//! Three solvers are provided. [`qprox_rnn`] runs the recurrent Jacobi-style
//! update used inside networks. [`qprox_oracle`] is a proximal-gradient
//! solver with a guaranteed step size. [`support_oracle`] enumerates active
//! sets for single columns of small dimension.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, Cholesky};
use crate::metric::{QMetric, Regularizer, RnnCell};

/// Unrolling depth used when a cell is built without an explicit count.
pub const DEFAULT_TT_MAX: usize = 3;

/// Early-stop threshold for standalone recurrent prox evaluation.
pub const RNN_EARLY_STOP: f64 = 1e-9;

const POWER_STEPS: usize = 50;
const POWER_SEED: u64 = 0x5eed;

/// Largest dimension accepted by [`support_oracle`].
pub const SUPPORT_ORACLE_MAX_DIM: usize = 12;
const KKT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ProxProblem {
    z: Array2<f64>,
    q: QMetric,
    reg: Regularizer,
}

impl ProxProblem {
    /// `z` holds one input per column (k × N).
    pub fn new(z: Array2<f64>, q: QMetric, reg: Regularizer) -> Result<Self> {
        if z.ncols() == 0 {
            return Err(Error::Shape("prox problem needs at least one column".into()));
        }
        if z.nrows() != q.dim() {
            return Err(Error::Shape(format!(
                "input has {} rows, metric is {}x{}",
                z.nrows(),
                q.dim(),
                q.dim()
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prox input".into()));
        }
        Ok(Self { z, q, reg })
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn metric(&self) -> &QMetric {
        &self.q
    }

    pub fn regularizer(&self) -> Regularizer {
        self.reg
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn columns(&self) -> usize {
        self.z.ncols()
    }

    /// `½‖U − Z‖²_{F,Q} + λ‖U‖₁ + (β/2)‖U‖²_F`, or `+∞` when `U` has a
    /// negative entry.
    pub fn objective(&self, u: ArrayView2<f64>) -> f64 {
        if u.iter().any(|&v| v < 0.0) {
            return f64::INFINITY;
        }
        let diff = &u - &self.z;
        let qd = self.q.matrix().dot(&diff);
        let quad = 0.5 * (&diff * &qd).sum();
        let l1: f64 = u.iter().sum();
        let sq: f64 = u.iter().map(|v| v * v).sum();
        quad + self.reg.lambda() * l1 + 0.5 * self.reg.beta() * sq
    }
}

/// Maps `(Q, λ, β)` to the recurrent cell whose fixed points are the prox
/// points:
///
/// * `h_i = q_ii / (q_ii + β)`
/// * `b_i = λ / (q_ii + β)`
/// * `W̃_{iℓ} = −q_{iℓ} / (q_ii + β)` for `ℓ ≠ i`, zero diagonal.
pub fn reparameterize(q: &QMetric, reg: Regularizer) -> Result<RnnCell> {
    reparameterize_with_depth(q, reg, DEFAULT_TT_MAX)
}

pub fn reparameterize_with_depth(q: &QMetric, reg: Regularizer, tt_max: usize) -> Result<RnnCell> {
    let qm = q.matrix();
    let k = q.dim();
    let beta = reg.beta();
    if let Some(i) = (0..k).find(|&i| !(qm[[i, i]] > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "metric diagonal entry {i} is {} (must be positive)",
            qm[[i, i]]
        )));
    }
    let denom: Array1<f64> = qm.diag().mapv(|qii| qii + beta);
    let h = Array1::from_shape_fn(k, |i| qm[[i, i]] / denom[i]);
    let b = denom.mapv(|d| reg.lambda() / d);
    let wt = Array2::from_shape_fn((k, k), |(i, l)| if i == l { 0.0 } else { -qm[[i, l]] / denom[i] });
    RnnCell::new(wt, h, b, tt_max)
}

/// Pre-activation of one recurrent step: `h ⊙ Z + W̃ (U − Z) − b`.
pub(crate) fn rnn_preactivation(cell: &RnnCell, z: ArrayView2<f64>, u: ArrayView2<f64>) -> Array2<f64> {
    let mut p = cell.wt.dot(&(&u - &z));
    p += &(&z * &cell.h.view().insert_axis(Axis(1)));
    p -= &cell.b.view().insert_axis(Axis(1));
    p
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

fn check_cell(cell: &RnnCell, rows: usize) -> Result<()> {
    if cell.dim() != rows {
        return Err(Error::Shape(format!(
            "cell dimension {} does not match input rows {rows}",
            cell.dim()
        )));
    }
    if !cell.is_feasible() {
        return Err(Error::InvalidParameter("cell violates its constraints".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RnnOutput {
    pub u: Array2<f64>,
    pub iterations: usize,
    /// Max-entry change of the last step.
    pub last_change: f64,
}

/// Runs exactly `cell.tt_max()` recurrent steps from `U₀ = 0`.
pub fn qprox_rnn(prob: &ProxProblem, cell: &RnnCell) -> Result<Array2<f64>> {
    Ok(run_rnn(prob.input().view(), cell, None)?.u)
}

/// Runs at most `cell.tt_max()` steps, stopping once the max-entry change
/// drops to `tol` or below.
pub fn qprox_rnn_until(prob: &ProxProblem, cell: &RnnCell, tol: f64) -> Result<RnnOutput> {
    run_rnn(prob.input().view(), cell, Some(tol))
}

pub(crate) fn run_rnn(z: ArrayView2<f64>, cell: &RnnCell, tol: Option<f64>) -> Result<RnnOutput> {
    check_cell(cell, z.nrows())?;
    let mut u = Array2::<f64>::zeros(z.raw_dim());
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..cell.tt_max() {
        let mut next = rnn_preactivation(cell, z, u.view());
        relu_inplace(&mut next);
        last_change = next
            .iter()
            .zip(u.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        u = next;
        iterations += 1;
        if tol.is_some_and(|t| last_change <= t) {
            break;
        }
    }
    Ok(RnnOutput {
        u,
        iterations,
        last_change,
    })
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; zero when absent.
    pub start: Option<Array2<f64>>,
    pub record_objective: bool,
}

impl OracleOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            start: None,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub u: Array2<f64>,
    pub iterations: usize,
    /// False when `max_iter` ran out before the change fell to `tol`.
    pub converged: bool,
    pub step: f64,
    /// Objective at the start point followed by one value per iteration,
    /// when requested.
    pub objective_trace: Vec<f64>,
}

/// Proximal gradient on the prox problem with step `1/λ_max(Q)`.
pub fn qprox_oracle(prob: &ProxProblem, tol: f64, max_iter: usize) -> OracleSolution {
    qprox_oracle_with(prob, &OracleOptions::new(tol, max_iter))
}

pub fn qprox_oracle_with(prob: &ProxProblem, opts: &OracleOptions) -> OracleSolution {
    let q = prob.metric().matrix();
    let z = prob.input();
    let lambda = prob.regularizer().lambda();
    let beta = prob.regularizer().beta();
    let step = 1.0 / power_iteration(q.view(), POWER_STEPS, POWER_SEED);
    let thresh = step * lambda;
    let shrink = 1.0 / (1.0 + step * beta);

    let mut u = match &opts.start {
        Some(s) if s.dim() == z.dim() => s.mapv(|v| v.max(0.0)),
        _ => Array2::zeros(z.raw_dim()),
    };
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(prob.objective(u.view()));
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let grad = q.dot(&(&u - z));
        let next = (&u - &(grad * step)).mapv(|v| ((v - thresh) * shrink).max(0.0));
        let change = next
            .iter()
            .zip(u.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        u = next;
        iterations += 1;
        if opts.record_objective {
            trace.push(prob.objective(u.view()));
        }
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    OracleSolution {
        u,
        iterations,
        converged,
        step,
        objective_trace: trace,
    }
}

/// Brute-force prox for a single column: tries every support `S`, solves
/// `(Q_SS + βI) u_S = (Qz)_S − λ𝟏` and keeps the pattern satisfying the
/// KKT conditions.
pub fn support_oracle(prob: &ProxProblem) -> Result<Array1<f64>> {
    let k = prob.dim();
    if prob.columns() != 1 {
        return Err(Error::Shape(format!(
            "support oracle takes a single column, got {}",
            prob.columns()
        )));
    }
    if k > SUPPORT_ORACLE_MAX_DIM {
        return Err(Error::InvalidParameter(format!(
            "support oracle limited to k <= {SUPPORT_ORACLE_MAX_DIM}, got {k}"
        )));
    }
    let q = prob.metric().matrix();
    let z = prob.input().column(0).to_owned();
    let lambda = prob.regularizer().lambda();
    let beta = prob.regularizer().beta();
    let qz = q.dot(&z);

    for mask in 0u32..(1u32 << k) {
        let support: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let mut u = Array1::<f64>::zeros(k);
        if !support.is_empty() {
            let n = support.len();
            let sys = Array2::from_shape_fn((n, n), |(a, b)| {
                q[[support[a], support[b]]] + if a == b { beta } else { 0.0 }
            });
            let rhs = Array1::from_shape_fn(n, |a| qz[support[a]] - lambda);
            let Ok(chol) = Cholesky::new(sys.view()) else {
                continue;
            };
            let us = chol.solve_vec(rhs.view());
            if us.iter().any(|&v| v < -KKT_TOL) {
                continue;
            }
            for (a, &i) in support.iter().enumerate() {
                u[i] = us[a].max(0.0);
            }
        }
        let resid = q.dot(&(&u - &z));
        let kkt_ok = (0..k)
            .filter(|i| mask & (1 << i) == 0)
            .all(|i| resid[i] + lambda >= -KKT_TOL);
        if kkt_ok {
            return Ok(u);
        }
    }
    Err(Error::NoKktSupport { tol: KKT_TOL })
}

/// Max-entry distance between `U` and the piecewise fixed-point map
/// evaluated at `U`:
///
/// `T(U)_{ij} = q_ii z_ij/(q_ii+β) − v_ij` if `q_ii z_ij > (q_ii+β) v_ij`,
/// else 0, with `v_ij = (λ + Σ_{ℓ≠i} q_iℓ (u_ℓj − z_ℓj)) / (q_ii+β)`.
pub fn fixed_point_residual(u: ArrayView2<f64>, prob: &ProxProblem) -> Result<f64> {
    let z = prob.input();
    if u.dim() != z.dim() {
        return Err(Error::Shape(format!("U is {:?}, Z is {:?}", u.dim(), z.dim())));
    }
    let q = prob.metric().matrix();
    let lambda = prob.regularizer().lambda();
    let beta = prob.regularizer().beta();
    let (k, n) = z.dim();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..k {
            let qii = q[[i, i]];
            let mut coupling = 0.0;
            for l in 0..k {
                if l != i {
                    coupling += q[[i, l]] * (u[[l, j]] - z[[l, j]]);
                }
            }
            let v = (lambda + coupling) / (qii + beta);
            let mapped = if qii * z[[i, j]] > (qii + beta) * v {
                qii / (qii + beta) * z[[i, j]] - v
            } else {
                0.0
            };
            worst = worst.max((u[[i, j]] - mapped).abs());
        }
    }
    Ok(worst)
}

/// Single column of a prox problem as its own problem.
pub fn column_problem(prob: &ProxProblem, j: usize) -> ProxProblem {
    ProxProblem {
        z: prob.z.slice(s![.., j..j + 1]).to_owned(),
        q: prob.q.clone(),
        reg: prob.reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn q2() -> QMetric {
        QMetric::new(array![[2.0, 1.0], [1.0, 3.0]]).unwrap()
    }

    #[test]
    fn reparameterize_2x2() {
        let cell = reparameterize(&q2(), Regularizer::new(0.5, 1.0).unwrap()).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(cell.gain()[0], 2.0 / 3.0) && close(cell.gain()[1], 0.75));
        assert!(close(cell.threshold()[0], 1.0 / 6.0) && close(cell.threshold()[1], 0.125));
        let wt = cell.coupling();
        assert_eq!(wt[[0, 0]], 0.0);
        assert_eq!(wt[[1, 1]], 0.0);
        assert!(close(wt[[0, 1]], -1.0 / 3.0) && close(wt[[1, 0]], -0.25));
    }

    #[test]
    fn reparameterize_identity() {
        let q = QMetric::new(Array2::eye(3)).unwrap();
        let cell = reparameterize(&q, Regularizer::new(0.3, 0.5).unwrap()).unwrap();
        assert!(cell.coupling().iter().all(|&v| v == 0.0));
        assert!(cell.gain().iter().all(|&v| v == 1.0 / 1.5));
        assert!(cell.threshold().iter().all(|&v| v == 0.3 / 1.5));
    }

    #[test]
    fn rnn_zero_input_stays_zero() {
        let cell = reparameterize_with_depth(&q2(), Regularizer::new(0.5, 1.0).unwrap(), 7).unwrap();
        let prob = ProxProblem::new(Array2::zeros((2, 3)), q2(), Regularizer::new(0.5, 1.0).unwrap()).unwrap();
        assert!(qprox_rnn(&prob, &cell).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_scalar_one_step() {
        let q = QMetric::new(array![[1.0]]).unwrap();
        let reg = Regularizer::new(1.0, 1.0).unwrap();
        let cell = reparameterize_with_depth(&q, reg, 1).unwrap();
        let prob = ProxProblem::new(array![[3.0]], q, reg).unwrap();
        assert_eq!(qprox_rnn(&prob, &cell).unwrap(), array![[1.0]]);
    }

    #[test]
    fn rnn_shape_mismatch() {
        let reg = Regularizer::new(0.5, 1.0).unwrap();
        let cell = RnnCell::separable(3, 0.5, 0.1, 2).unwrap();
        let prob = ProxProblem::new(array![[1.0], [2.0]], q2(), reg).unwrap();
        assert!(matches!(qprox_rnn(&prob, &cell), Err(Error::Shape(_))));
    }

    #[test]
    fn oracle_separable_clamps_negative() {
        let q = QMetric::new(Array2::eye(2)).unwrap();
        let prob = ProxProblem::new(array![[3.0], [-2.0]], q, Regularizer::new(1.0, 1.0).unwrap()).unwrap();
        let sol = qprox_oracle(&prob, 1e-12, 1000);
        assert!(sol.converged);
        assert!((sol.u[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(sol.u[[1, 0]], 0.0);
    }

    #[test]
    fn oracle_flags_exhausted_budget() {
        let prob = ProxProblem::new(array![[1.0], [2.0]], q2(), Regularizer::new(0.5, 1.0).unwrap()).unwrap();
        let sol = qprox_oracle(&prob, 1e-14, 2);
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn support_oracle_scalar() {
        let q = QMetric::new(array![[2.0]]).unwrap();
        let prob = ProxProblem::new(array![[1.0]], q, Regularizer::new(0.5, 1.0).unwrap()).unwrap();
        let u = support_oracle(&prob).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn support_oracle_nonpositive_input() {
        let q = QMetric::new(array![[2.0, 0.5, 0.2], [0.5, 3.0, 0.1], [0.2, 0.1, 1.0]]).unwrap();
        let prob = ProxProblem::new(array![[-1.0], [0.0], [-0.3]], q, Regularizer::default()).unwrap();
        assert_eq!(support_oracle(&prob).unwrap(), Array1::<f64>::zeros(3));
    }

    #[test]
    fn support_oracle_rejects_batches_and_large_k() {
        let prob = ProxProblem::new(Array2::zeros((2, 2)), q2(), Regularizer::default()).unwrap();
        assert!(support_oracle(&prob).is_err());
        let q = QMetric::new(Array2::eye(13)).unwrap();
        let prob = ProxProblem::new(Array2::zeros((13, 1)), q, Regularizer::default()).unwrap();
        assert!(support_oracle(&prob).is_err());
    }

    #[test]
    fn residual_zero_at_origin() {
        let prob = ProxProblem::new(Array2::zeros((2, 2)), q2(), Regularizer::default()).unwrap();
        assert_eq!(fixed_point_residual(Array2::zeros((2, 2)).view(), &prob).unwrap(), 0.0);
    }

    #[test]
    fn residual_detects_perturbation() {
        let reg = Regularizer::new(0.5, 1.0).unwrap();
        let prob = ProxProblem::new(array![[1.0], [2.0]], q2(), reg).unwrap();
        let mut u = qprox_oracle(&prob, 1e-12, 100_000).u;
        let active = (0..2).find(|&i| u[[i, 0]] > 0.0).unwrap();
        u[[active, 0]] += 0.1;
        assert!(fixed_point_residual(u.view(), &prob).unwrap() >= 0.09);
    }

    #[test]
    fn problem_validation() {
        assert!(ProxProblem::new(Array2::zeros((2, 0)), q2(), Regularizer::default()).is_err());
        assert!(ProxProblem::new(Array2::zeros((3, 1)), q2(), Regularizer::default()).is_err());
        assert!(ProxProblem::new(array![[f64::NAN], [0.0]], q2(), Regularizer::default()).is_err());
    }
}
