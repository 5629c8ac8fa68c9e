//! Finite-difference checks of every differentiable primitive and of a
//! full two-layer model.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::instances::gaussian;
use crate::metric::{AffineTransform, RnnCell};
use crate::net::gradcheck::{finite_diff_check, projection};
use crate::net::model::{init_conv, init_dense};
use crate::net::{
    check_model, Activation, ActivationKind, Conv2D, GradCheckReport, Layer, LinearOp, Model, ReshapeOp, Signal,
};
use crate::train::softmax_cross_entropy;

pub const SUITE_EPSILON: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn signal_values(s: &Signal) -> Vec<f64> {
    s.iter().copied().collect()
}

fn signal_like(s: &Signal, values: &[f64]) -> Signal {
    match s {
        Signal::Flat(a) => Signal::Flat(Array2::from_shape_vec(a.raw_dim(), values.to_vec()).expect("same size")),
        Signal::Spatial(a) => Signal::Spatial(Array4::from_shape_vec(a.raw_dim(), values.to_vec()).expect("same size")),
    }
}

fn scalarize(s: &Signal, r: &[f64]) -> f64 {
    s.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Input gradient of a parameter-free map, checked through `⟨R, op(x)⟩`.
fn check_input_map(
    x: &Signal,
    eps: f64,
    seed: u64,
    forward: impl Fn(&Signal) -> Result<Signal>,
    backward: impl Fn(&Signal, &Signal) -> Result<Signal>,
) -> Result<GradCheckReport> {
    let y = forward(x)?;
    let r: Vec<f64> = projection(1, y.iter().count(), seed).into_iter().collect();
    let gx = backward(x, &signal_like(&y, &r))?;
    let theta = signal_values(x);
    Ok(finite_diff_check(&theta, &signal_values(&gx), eps, |p| {
        scalarize(&forward(&signal_like(x, p)).expect("forward"), &r)
    }))
}

/// Parameters and input of a linear op, checked jointly.
fn check_linear(op: &LinearOp, x: &Signal, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let y = op.forward(x)?;
    let r: Vec<f64> = projection(1, y.iter().count(), seed).into_iter().collect();
    let (pg, gx) = op.backward(x, &signal_like(&y, &r))?;
    let mut analytic: Vec<f64> = pg.iter().flat_map(|a| a.iter().copied()).collect();
    analytic.extend(signal_values(&gx));

    let param_arrays: Vec<ArrayD<f64>> = match op {
        LinearOp::Dense(t) => vec![t.w.clone().into_dyn(), t.c.clone().into_dyn()],
        LinearOp::Conv2D(c) => vec![c.kernel.clone().into_dyn(), c.bias.clone().into_dyn()],
    };
    let mut theta: Vec<f64> = param_arrays.iter().flat_map(|a| a.iter().copied()).collect();
    let n_params = theta.len();
    theta.extend(signal_values(x));

    let rebuild = |p: &[f64]| -> LinearOp {
        let mut off = 0;
        let mut next = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let a = ArrayD::from_shape_vec(IxDyn(shape), p[off..off + n].to_vec()).expect("size");
            off += n;
            a
        };
        match op {
            LinearOp::Dense(t) => {
                let w = next(t.w.shape()).into_dimensionality().expect("2d");
                let c = next(t.c.shape()).into_dimensionality().expect("1d");
                LinearOp::Dense(AffineTransform { w, c })
            }
            LinearOp::Conv2D(c) => {
                let kernel = next(c.kernel.shape()).into_dimensionality().expect("4d");
                let bias = next(c.bias.shape()).into_dimensionality().expect("1d");
                LinearOp::Conv2D(Conv2D {
                    kernel,
                    bias,
                    stride: c.stride,
                    padding: c.padding,
                })
            }
        }
    };
    Ok(finite_diff_check(&theta, &analytic, eps, |p| {
        let op = rebuild(&p[..n_params]);
        let x = signal_like(x, &p[n_params..]);
        scalarize(&op.forward(&x).expect("forward"), &r)
    }))
}

/// Coupling, gain, threshold and input of a Q-Metric activation.
fn check_cell(cell: &RnnCell, z: &Signal, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let act = Activation::QMetric(cell.clone());
    let (y, trace) = act.forward(z)?;
    let r: Vec<f64> = projection(1, y.iter().count(), seed).into_iter().collect();
    let (pg, gz) = act.backward(&trace, &signal_like(&y, &r))?;
    let mut analytic: Vec<f64> = pg.iter().flat_map(|a| a.iter().copied()).collect();
    analytic.extend(signal_values(&gz));

    let k = cell.dim();
    let mut theta: Vec<f64> = cell
        .wt
        .iter()
        .chain(cell.h.iter())
        .chain(cell.b.iter())
        .copied()
        .collect();
    theta.extend(signal_values(z));
    let tt = cell.tt_max();
    Ok(finite_diff_check(&theta, &analytic, eps, |p| {
        // Perturbed parameters may leave the constraint sets; the forward
        // map is still well defined there.
        let probe = RnnCell {
            wt: Array2::from_shape_vec((k, k), p[..k * k].to_vec()).expect("size"),
            h: Array1::from(p[k * k..k * k + k].to_vec()),
            b: Array1::from(p[k * k + k..k * k + 2 * k].to_vec()),
            tt_max: tt,
        };
        let out = Activation::QMetric(probe)
            .apply(&signal_like(z, &p[k * k + 2 * k..]))
            .expect("forward");
        scalarize(&out, &r)
    }))
}

/// Random cell with nonzero coupling and inputs spread enough that no
/// pre-activation sits on the ReLU kink.
pub fn random_cell(k: usize, tt_max: usize, rng: &mut ChaCha8Rng) -> RnnCell {
    let mut wt = gaussian(k, k, rng) * 0.3;
    wt.diag_mut().fill(0.0);
    let uni = Uniform::new(0.2, 0.9).expect("range");
    let h = Array1::from_shape_simple_fn(k, || uni.sample(rng));
    let b = Array1::from_shape_simple_fn(k, || 0.1 * uni.sample(rng));
    RnnCell::new(wt, h, b, tt_max).expect("feasible")
}

/// Two Q-Metric layers (widths 6 and 5) and a 3-class head on 4 inputs.
pub fn two_layer_model(seed: u64, tt_max: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = Layer::new(
        LinearOp::Dense(init_dense(4, 6, &mut rng)),
        Activation::QMetric(random_cell(6, tt_max, &mut rng)),
    );
    let l1 = Layer::new(
        LinearOp::Dense(init_dense(6, 5, &mut rng)),
        Activation::QMetric(random_cell(5, tt_max, &mut rng)),
    );
    let mut head = init_dense(5, 3, &mut rng);
    head.c = crate::instances::gaussian_vec(3, &mut rng) * 0.1;
    Model::new(vec![4], vec![l0, l1], head).expect("consistent shapes")
}

pub fn run_suite(epsilon: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut dense = init_dense(5, 4, &mut rng);
    dense.c = crate::instances::gaussian_vec(4, &mut rng);
    let x = Signal::Flat(gaussian(5, 3, &mut rng));
    out.push(SuiteEntry {
        name: "dense",
        report: check_linear(&LinearOp::Dense(dense), &x, epsilon, seed + 1)?,
    });

    // keep every input at least 0.1 away from the kink
    let z = gaussian(4, 6, &mut rng).mapv(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    out.push(SuiteEntry {
        name: "relu",
        report: check_input_map(
            &Signal::Flat(z),
            epsilon,
            seed + 2,
            |s| Activation::PlainRelu.apply(s),
            |s, g| {
                let (_, tr) = Activation::PlainRelu.forward(s)?;
                Ok(Activation::PlainRelu.backward(&tr, g)?.1)
            },
        )?,
    });

    let cell = random_cell(4, 3, &mut rng);
    let z = Signal::Flat(gaussian(4, 5, &mut rng));
    out.push(SuiteEntry {
        name: "qmetric_activation",
        report: check_cell(&cell, &z, epsilon, seed + 3)?,
    });

    let mut conv = init_conv(3, 2, (3, 3), 2, 1, &mut rng)?;
    conv.bias = crate::instances::gaussian_vec(3, &mut rng);
    let x = Signal::Spatial(
        gaussian(2 * 2 * 5, 6, &mut rng)
            .into_shape_with_order((2, 2, 5, 6))
            .expect("reshape"),
    );
    out.push(SuiteEntry {
        name: "conv2d",
        report: check_linear(&LinearOp::Conv2D(conv), &x, epsilon, seed + 4)?,
    });

    let cell = random_cell(3, 2, &mut rng);
    let z = Signal::Spatial(
        gaussian(2 * 3 * 2, 3, &mut rng)
            .into_shape_with_order((2, 3, 2, 3))
            .expect("reshape"),
    );
    out.push(SuiteEntry {
        name: "qmetric_spatial",
        report: check_cell(&cell, &z, epsilon, seed + 5)?,
    });

    let reshape = ReshapeOp::flatten(vec![2, 3, 2])?;
    let x = Signal::Spatial(
        gaussian(3 * 2 * 3, 2, &mut rng)
            .into_shape_with_order((3, 2, 3, 2))
            .expect("reshape"),
    );
    out.push(SuiteEntry {
        name: "reshape",
        report: check_input_map(
            &x,
            epsilon,
            seed + 6,
            |s| reshape.forward(s),
            |_, g| reshape.backward(g),
        )?,
    });

    let logits = gaussian(4, 5, &mut rng);
    let labels = vec![0, 3, 1, 2, 1];
    let (_, grad) = softmax_cross_entropy(logits.view(), &labels)?;
    let theta: Vec<f64> = logits.iter().copied().collect();
    out.push(SuiteEntry {
        name: "softmax_cross_entropy",
        report: finite_diff_check(&theta, &grad.iter().copied().collect::<Vec<_>>(), epsilon, |p| {
            let l = Array2::from_shape_vec((4, 5), p.to_vec()).expect("size");
            softmax_cross_entropy(l.view(), &labels).expect("valid").0
        }),
    });

    let model = two_layer_model(seed + 7, 3);
    let x = Signal::Flat(gaussian(4, 4, &mut rng));
    out.push(SuiteEntry {
        name: "two_layer_model",
        report: check_model(&model, &x, epsilon, seed + 8)?,
    });

    let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 9);
    let mixed = {
        let conv = init_conv(3, 1, (3, 3), 1, 1, &mut rng2)?;
        let l0 = Layer::new(
            LinearOp::Conv2D(conv),
            Activation::QMetric(random_cell(3, 2, &mut rng2)),
        )
        .with_reshape(ReshapeOp::flatten(vec![3, 4, 4])?);
        let l1 = Layer::new(
            LinearOp::Dense(init_dense(48, 5, &mut rng2)),
            ActivationKind::PlainRelu.init(5, 1)?,
        );
        Model::new(vec![1, 4, 4], vec![l0, l1], init_dense(5, 2, &mut rng2))?
    };
    let x = Signal::Spatial(
        gaussian(3 * 16, 1, &mut rng2)
            .into_shape_with_order((3, 1, 4, 4))
            .expect("reshape"),
    );
    out.push(SuiteEntry {
        name: "conv_qmetric_model",
        report: check_model(&mixed, &x, epsilon, seed + 10)?,
    });

    Ok(out)
}
