//! Single-layer synthesis sparse coding and its equivalence with the
//! metric prox of the transformed signal.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::metric::{transform_from_dictionary, Dictionary, Regularizer};
use crate::qprox::{qprox_oracle, ProxProblem};

const POWER_STEPS: usize = 100;
const POWER_SEED: u64 = 0xd1c7;

pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub a: Array1<f64>,
    pub objective: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SparseCodeOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub start: Option<Array1<f64>>,
    pub record_objective: bool,
}

impl SparseCodeOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            start: None,
            record_objective: false,
        }
    }
}

/// `½‖x − Da‖² + (α/2)‖a‖² + dᵀa + λ‖a‖₁ + (β/2)‖a‖²`, `+∞` off the
/// nonnegative orthant.
pub fn sparse_objective(dict: &Dictionary, reg: Regularizer, x: ArrayView1<f64>, a: ArrayView1<f64>) -> f64 {
    if a.iter().any(|&v| v < 0.0) {
        return f64::INFINITY;
    }
    let r = &x - &dict.atoms().dot(&a);
    let sq = a.dot(&a);
    0.5 * r.dot(&r) + 0.5 * dict.alpha() * sq + dict.linear().dot(&a) + reg.lambda() * a.sum() + 0.5 * reg.beta() * sq
}

pub fn sparse_code(
    dict: &Dictionary,
    reg: Regularizer,
    x: ArrayView1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SparseCode> {
    Ok(sparse_code_with(dict, reg, x, &SparseCodeOptions::new(tol, max_iter))?.0)
}

/// Proximal gradient on the sparse-coding objective. Returns the code and,
/// if requested, the objective after every iteration (starting point first).
pub fn sparse_code_with(
    dict: &Dictionary,
    reg: Regularizer,
    x: ArrayView1<f64>,
    opts: &SparseCodeOptions,
) -> Result<(SparseCode, Vec<f64>)> {
    if x.len() != dict.signal_dim() {
        return Err(Error::Shape(format!(
            "signal has length {}, dictionary expects {}",
            x.len(),
            dict.signal_dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("signal".into()));
    }
    let d = dict.atoms();
    let gram = d.t().dot(d);
    let lipschitz = power_iteration(gram.view(), POWER_STEPS, POWER_SEED) + dict.alpha();
    let step = 1.0 / lipschitz;
    let thresh = step * reg.lambda();
    let shrink = 1.0 / (1.0 + step * reg.beta());
    // ∇g(a) = DᵀD a − Dᵀx + αa + d
    let offset = dict.linear() - &d.t().dot(&x);

    let k = dict.code_dim();
    let mut a = match &opts.start {
        Some(s) if s.len() == k => s.mapv(|v| v.max(0.0)),
        _ => Array1::zeros(k),
    };
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(sparse_objective(dict, reg, x, a.view()));
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let grad = gram.dot(&a) + &(&a * dict.alpha()) + &offset;
        let next = (&a - &(grad * step)).mapv(|v| ((v - thresh) * shrink).max(0.0));
        let change = next
            .iter()
            .zip(a.iter())
            .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        a = next;
        iterations += 1;
        if opts.record_objective {
            trace.push(sparse_objective(dict, reg, x, a.view()));
        }
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    let objective = sparse_objective(dict, reg, x, a.view());
    Ok((
        SparseCode {
            a,
            objective,
            iterations_used: iterations,
            converged,
        },
        trace,
    ))
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// Codes from direct sparse coding, one column per signal.
    pub direct: Array2<f64>,
    /// Codes from the metric prox of `F X − c 𝟏ᵀ`.
    pub via_prox: Array2<f64>,
    pub max_discrepancy: f64,
    pub tol: f64,
    pub passed: bool,
    /// Whether both solvers met their stopping tolerance.
    pub solvers_converged: bool,
}

/// Compares column-wise sparse codes of `x` (m × N) with the metric prox of
/// the transformed signals, both solved to [`DEFAULT_SOLVER_TOL`].
pub fn check_equivalence(
    dict: &Dictionary,
    reg: Regularizer,
    x: ArrayView2<f64>,
    tol: f64,
) -> Result<EquivalenceReport> {
    check_equivalence_with(dict, reg, x, tol, DEFAULT_SOLVER_TOL, DEFAULT_MAX_ITER)
}

pub fn check_equivalence_with(
    dict: &Dictionary,
    reg: Regularizer,
    x: ArrayView2<f64>,
    tol: f64,
    solver_tol: f64,
    max_iter: usize,
) -> Result<EquivalenceReport> {
    let k = dict.code_dim();
    let n = x.ncols();
    let mut direct = Array2::<f64>::zeros((k, n));
    let mut all_converged = true;
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let code = sparse_code(dict, reg, col, solver_tol, max_iter)?;
        all_converged &= code.converged;
        direct.column_mut(j).assign(&code.a);
    }

    let (transform, q) = transform_from_dictionary(dict)?;
    let z = transform.apply(x);
    let prob = ProxProblem::new(z, q, reg)?;
    let sol = qprox_oracle(&prob, solver_tol, max_iter);
    all_converged &= sol.converged;

    let max_discrepancy = direct
        .iter()
        .zip(sol.u.iter())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    Ok(EquivalenceReport {
        direct,
        via_prox: sol.u,
        max_discrepancy,
        tol,
        passed: max_discrepancy <= tol,
        solvers_converged: all_converged,
    })
}
