//! Layer nonlinearities: the Q-Metric activation (unrolled recurrent prox
//! iteration) and the plain ReLU baseline.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::metric::RnnCell;
use crate::qprox::rnn_preactivation;

use super::signal::{channels_as_columns, columns_as_channels, Signal};

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    /// One cell shared by every column (and every spatial location of a
    /// spatial signal, acting on its channel vector).
    QMetric(RnnCell),
    PlainRelu,
}

/// Intermediate values kept by the forward pass.
#[derive(Debug, Clone)]
pub enum ActivationTrace {
    QMetric {
        /// Input to the iteration, as a k × M matrix.
        z: Array2<f64>,
        /// States `U_0 .. U_{T-1}` fed into each step.
        states: Vec<Array2<f64>>,
        /// Pre-activations `P_0 .. P_{T-1}`.
        preacts: Vec<Array2<f64>>,
    },
    Relu {
        z: Signal,
    },
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn relu_mask(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Runs exactly `tt_max` steps from zero, keeping every state.
pub(crate) fn unroll(cell: &RnnCell, z: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut u = Array2::<f64>::zeros(z.raw_dim());
    let mut states = Vec::with_capacity(cell.tt_max());
    let mut preacts = Vec::with_capacity(cell.tt_max());
    for _ in 0..cell.tt_max() {
        let p = rnn_preactivation(cell, z, u.view());
        let next = p.mapv(relu);
        states.push(u);
        preacts.push(p);
        u = next;
    }
    (u, states, preacts)
}

/// Gradients of a cell and its input given the gradient at `U_T`.
pub(crate) struct CellBackward {
    pub coupling: Array2<f64>,
    pub gain: Array1<f64>,
    pub threshold: Array1<f64>,
    pub input: Array2<f64>,
}

pub(crate) fn unroll_backward(
    cell: &RnnCell,
    z: &Array2<f64>,
    states: &[Array2<f64>],
    preacts: &[Array2<f64>],
    grad_out: Array2<f64>,
) -> CellBackward {
    let k = cell.dim();
    let mut g_wt = Array2::<f64>::zeros((k, k));
    let mut g_h = Array1::<f64>::zeros(k);
    let mut g_b = Array1::<f64>::zeros(k);
    let mut g_z = Array2::<f64>::zeros(z.raw_dim());
    let h_col = cell.h.view().insert_axis(Axis(1));
    let mut g = grad_out;
    for (u, p) in states.iter().zip(preacts.iter()).rev() {
        let gp = &g * &p.mapv(relu_mask);
        g_wt += &gp.dot(&(u - z).t());
        g_h += &(&gp * z).sum_axis(Axis(1));
        g_b -= &gp.sum_axis(Axis(1));
        let back = cell.wt.t().dot(&gp);
        g_z += &(&gp * &h_col);
        g_z -= &back;
        g = back;
    }
    CellBackward {
        coupling: g_wt,
        gain: g_h,
        threshold: g_b,
        input: g_z,
    }
}

impl Activation {
    pub fn cell(&self) -> Option<&RnnCell> {
        match self {
            Activation::QMetric(c) => Some(c),
            Activation::PlainRelu => None,
        }
    }

    pub fn cell_mut(&mut self) -> Option<&mut RnnCell> {
        match self {
            Activation::QMetric(c) => Some(c),
            Activation::PlainRelu => None,
        }
    }

    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if let Activation::QMetric(cell) = self {
            let k = shape.first().copied().unwrap_or(0);
            if k != cell.dim() {
                return Err(Error::Shape(format!(
                    "Q-Metric activation of dimension {} cannot act on sample shape {shape:?}",
                    cell.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, z: &Signal) -> Result<Signal> {
        Ok(self.forward(z)?.0)
    }

    pub fn forward(&self, z: &Signal) -> Result<(Signal, ActivationTrace)> {
        self.check_shape(&z.sample_shape())?;
        match self {
            Activation::PlainRelu => {
                let out = match z {
                    Signal::Flat(a) => Signal::Flat(a.mapv(relu)),
                    Signal::Spatial(a) => Signal::Spatial(a.mapv(relu)),
                };
                Ok((out, ActivationTrace::Relu { z: z.clone() }))
            }
            Activation::QMetric(cell) => {
                let zm = match z {
                    Signal::Flat(a) => a.clone(),
                    Signal::Spatial(a) => channels_as_columns(a),
                };
                let (u, states, preacts) = unroll(cell, zm.view());
                let out = match z {
                    Signal::Flat(_) => Signal::Flat(u),
                    Signal::Spatial(a) => {
                        let (n, _, h, w) = a.dim();
                        Signal::Spatial(columns_as_channels(u, n, h, w))
                    }
                };
                Ok((out, ActivationTrace::QMetric { z: zm, states, preacts }))
            }
        }
    }

    /// Returns the cell parameter gradients (coupling, gain, threshold;
    /// empty for ReLU) and the input gradient.
    pub fn backward(&self, trace: &ActivationTrace, grad_out: &Signal) -> Result<(Vec<ArrayD<f64>>, Signal)> {
        match (self, trace) {
            (Activation::PlainRelu, ActivationTrace::Relu { z }) => {
                let gz = match (z, grad_out) {
                    (Signal::Flat(a), Signal::Flat(g)) if a.dim() == g.dim() => Signal::Flat(g * &a.mapv(relu_mask)),
                    (Signal::Spatial(a), Signal::Spatial(g)) if a.dim() == g.dim() => {
                        Signal::Spatial(g * &a.mapv(relu_mask))
                    }
                    _ => return Err(Error::StaleCache("ReLU gradient shape".into())),
                };
                Ok((Vec::new(), gz))
            }
            (Activation::QMetric(cell), ActivationTrace::QMetric { z, states, preacts }) => {
                if states.len() != cell.tt_max() || z.nrows() != cell.dim() {
                    return Err(Error::StaleCache(
                        "Q-Metric trace does not match the cell (depth or dimension changed)".into(),
                    ));
                }
                let (g, spatial) = match grad_out {
                    Signal::Flat(g) => (g.clone(), None),
                    Signal::Spatial(g) => {
                        let (n, _, h, w) = g.dim();
                        (channels_as_columns(g), Some((n, h, w)))
                    }
                };
                if g.dim() != z.dim() {
                    return Err(Error::StaleCache("Q-Metric gradient shape".into()));
                }
                let back = unroll_backward(cell, z, states, preacts, g);
                let gz = match spatial {
                    None => Signal::Flat(back.input),
                    Some((n, h, w)) => Signal::Spatial(columns_as_channels(back.input, n, h, w)),
                };
                Ok((
                    vec![
                        back.coupling.into_dyn(),
                        back.gain.into_dyn(),
                        back.threshold.into_dyn(),
                    ],
                    gz,
                ))
            }
            _ => Err(Error::StaleCache("activation kind changed since forward".into())),
        }
    }
}
