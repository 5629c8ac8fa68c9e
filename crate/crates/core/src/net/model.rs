use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metric::{transform_from_dictionary, AffineTransform, Dictionary, Regularizer, RnnCell};
use crate::qprox::reparameterize_with_depth;

use super::activation::{Activation, ActivationTrace};
use super::linear::{Conv2D, LinearOp};
use super::reshape::ReshapeOp;
use super::signal::Signal;

/// Initial gain of a freshly initialized Q-Metric activation.
pub const INIT_GAIN: f64 = 0.5;
/// Initial threshold of a freshly initialized Q-Metric activation.
pub const INIT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    QMetric,
    PlainRelu,
}

impl ActivationKind {
    /// Default activation of width `k`: uncoupled cell with `h = 0.5`,
    /// `b = 0.01`.
    pub fn init(self, k: usize, tt_max: usize) -> Result<Activation> {
        Ok(match self {
            ActivationKind::QMetric => Activation::QMetric(RnnCell::separable(k, INIT_GAIN, INIT_THRESHOLD, tt_max)?),
            ActivationKind::PlainRelu => Activation::PlainRelu,
        })
    }
}

/// Linear part, activation, then an optional reshape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: LinearOp,
    pub activation: Activation,
    pub reshape: Option<ReshapeOp>,
}

impl Layer {
    pub fn new(linear: LinearOp, activation: Activation) -> Self {
        Self {
            linear,
            activation,
            reshape: None,
        }
    }

    pub fn with_reshape(mut self, reshape: ReshapeOp) -> Self {
        self.reshape = Some(reshape);
        self
    }

    /// Layer whose transform is `F = Q⁻¹Dᵀ`, `c = Q⁻¹d` and whose activation
    /// is the reparameterized prox cell of `(Q, λ, β)`.
    pub fn from_dictionary(dict: &Dictionary, reg: Regularizer, tt_max: usize) -> Result<Self> {
        let (transform, q) = transform_from_dictionary(dict)?;
        let cell = reparameterize_with_depth(&q, reg, tt_max)?;
        Ok(Self::new(LinearOp::Dense(transform), Activation::QMetric(cell)))
    }
}

/// Scaled-normal weights with standard deviation `√(2/fan_in)`.
pub fn init_weights<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn init_dense<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> AffineTransform {
    AffineTransform::new(init_weights(out_dim, in_dim, in_dim, rng), Array1::zeros(out_dim)).expect("finite init")
}

pub fn init_conv<R: Rng + ?Sized>(
    out_ch: usize,
    in_ch: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
    rng: &mut R,
) -> Result<Conv2D> {
    let fan_in = in_ch * kernel.0 * kernel.1;
    let flat = init_weights(out_ch, fan_in, fan_in, rng);
    let k = flat
        .into_shape_with_order((out_ch, in_ch, kernel.0, kernel.1))
        .expect("kernel reshape");
    Conv2D::new(k, Array1::zeros(out_ch), stride, padding)
}

/// Layers followed by a linear classifier head producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    head: AffineTransform,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Signal,
    trace: ActivationTrace,
    activated_shape: Vec<usize>,
}

/// Per-call record of a forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    head_input: Array2<f64>,
}

/// Parameter gradients, named and ordered as [`Model::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), ArrayD::zeros(a.raw_dim())))
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<(String, ArrayD<f64>)>) -> Self {
        Self { entries }
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }
}

fn layer_err(layer: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Layer {
        layer,
        message: e.to_string(),
    }
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, head: AffineTransform) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
            head,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Dense network `input → hidden[0] → … → classes` with freshly
    /// initialized weights and activations of the given kind.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        kind: ActivationKind,
        tt_max: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(Layer::new(
                LinearOp::Dense(init_dense(prev, width, rng)),
                kind.init(width, tt_max)?,
            ));
            prev = width;
        }
        let head = init_dense(prev, classes, rng);
        Self::new(vec![input_dim], layers, head)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        if !matches!(shape.len(), 1 | 3) {
            return Err(Error::Shape(format!(
                "model input must be [F] or [C, H, W], got {shape:?}"
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.linear.output_shape(&shape).map_err(layer_err(i))?;
            layer.activation.check_shape(&shape).map_err(layer_err(i))?;
            if let Some(r) = &layer.reshape {
                if r.input_shape() != shape.as_slice() {
                    return Err(Error::Layer {
                        layer: i,
                        message: format!("reshape expects {:?}, layer produces {shape:?}", r.input_shape()),
                    });
                }
                shape = r.output_shape().to_vec();
            }
        }
        if shape != [self.head.in_dim()] {
            return Err(Error::Layer {
                layer: self.layers.len(),
                message: format!("head expects [{}], got {shape:?}", self.head.in_dim()),
            });
        }
        if self.head.out_dim() == 0 {
            return Err(Error::Shape("head must produce at least one class".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> &AffineTransform {
        &self.head
    }

    pub fn class_count(&self) -> usize {
        self.head.out_dim()
    }

    pub fn cells(&self) -> impl Iterator<Item = &RnnCell> {
        self.layers.iter().filter_map(|l| l.activation.cell())
    }

    pub fn cells_mut(&mut self) -> impl Iterator<Item = &mut RnnCell> {
        self.layers.iter_mut().filter_map(|l| l.activation.cell_mut())
    }

    fn check_input(&self, x: &Signal) -> Result<()> {
        if x.sample_shape() != self.input_shape {
            return Err(Error::Layer {
                layer: 0,
                message: format!(
                    "input samples have shape {:?}, model expects {:?}",
                    x.sample_shape(),
                    self.input_shape
                ),
            });
        }
        if x.batch() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Logits (classes × N) and the cache needed for [`Model::backward`].
    pub fn forward(&self, x: &Signal) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.linear.forward(&cur).map_err(layer_err(i))?;
            let (u, trace) = layer.activation.forward(&z).map_err(layer_err(i))?;
            let activated_shape = u.sample_shape();
            let next = match &layer.reshape {
                Some(r) => r.forward(&u).map_err(layer_err(i))?,
                None => u,
            };
            caches.push(LayerCache {
                input: cur,
                trace,
                activated_shape,
            });
            cur = next;
        }
        let head_input = cur.into_flat().map_err(layer_err(self.layers.len()))?;
        let logits = self.head.apply(head_input.view());
        Ok((
            logits,
            ForwardCache {
                layers: caches,
                head_input,
            },
        ))
    }

    /// Forward pass without keeping intermediate values.
    pub fn predict(&self, x: &Signal) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.linear.forward(&cur).map_err(layer_err(i))?;
            let u = layer.activation.apply(&z).map_err(layer_err(i))?;
            cur = match &layer.reshape {
                Some(r) => r.forward(&u).map_err(layer_err(i))?,
                None => u,
            };
        }
        let h = cur.into_flat().map_err(layer_err(self.layers.len()))?;
        Ok(self.head.apply(h.view()))
    }

    /// Predicted class per column.
    pub fn classify(&self, x: &Signal) -> Result<Vec<usize>> {
        let logits = self.predict(x)?;
        Ok(argmax_columns(logits.view()))
    }

    /// Reverse-mode pass through every layer, including the unrolled
    /// recurrent steps of each Q-Metric activation.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<f64>) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let n = cache.head_input.ncols();
        if grad_logits.dim() != (self.class_count(), n) || cache.head_input.nrows() != self.head.in_dim() {
            return Err(Error::StaleCache(format!(
                "logit gradient {:?} does not match head output ({}, {n})",
                grad_logits.dim(),
                self.class_count()
            )));
        }
        let mut entries: Vec<(String, ArrayD<f64>)> = Vec::new();

        let head_w = grad_logits.dot(&cache.head_input.t());
        let head_c = -grad_logits.sum_axis(ndarray::Axis(1));
        let mut grad = Signal::Flat(self.head.w.t().dot(&grad_logits));

        let mut per_layer: Vec<Vec<(String, ArrayD<f64>)>> = Vec::with_capacity(self.layers.len());
        for (i, (layer, lc)) in self.layers.iter().zip(cache.layers.iter()).enumerate().rev() {
            let stale = |e: Error| match e {
                Error::StaleCache(m) => Error::StaleCache(format!("layer {i}: {m}")),
                other => layer_err(i)(other),
            };
            if let Some(r) = &layer.reshape {
                grad = r.backward(&grad).map_err(stale)?;
            }
            if grad.sample_shape() != lc.activated_shape {
                return Err(Error::StaleCache(format!("layer {i}: activation shape drifted")));
            }
            let (cell_grads, gz) = layer.activation.backward(&lc.trace, &grad).map_err(stale)?;
            let (lin_grads, gx) = layer.linear.backward(&lc.input, &gz).map_err(stale)?;
            let mut named = Vec::with_capacity(5);
            for (name, g) in layer.linear.parameter_names().iter().zip(lin_grads) {
                named.push((format!("layers.{i}.{name}"), g));
            }
            for (name, g) in CELL_PARAM_NAMES.iter().zip(cell_grads) {
                named.push((format!("layers.{i}.{name}"), g));
            }
            per_layer.push(named);
            grad = gx;
        }
        for named in per_layer.into_iter().rev() {
            entries.extend(named);
        }
        entries.push(("head.weight".into(), head_w.into_dyn()));
        entries.push(("head.offset".into(), head_c.into_dyn()));
        Ok(Gradients { entries })
    }

    /// Every trainable array with its name, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.linear {
                LinearOp::Dense(t) => {
                    out.push((format!("layers.{i}.weight"), t.w.view().into_dyn()));
                    out.push((format!("layers.{i}.offset"), t.c.view().into_dyn()));
                }
                LinearOp::Conv2D(c) => {
                    out.push((format!("layers.{i}.kernel"), c.kernel.view().into_dyn()));
                    out.push((format!("layers.{i}.bias"), c.bias.view().into_dyn()));
                }
            }
            if let Activation::QMetric(cell) = &layer.activation {
                out.push((format!("layers.{i}.coupling"), cell.wt.view().into_dyn()));
                out.push((format!("layers.{i}.gain"), cell.h.view().into_dyn()));
                out.push((format!("layers.{i}.threshold"), cell.b.view().into_dyn()));
            }
        }
        out.push(("head.weight".into(), self.head.w.view().into_dyn()));
        out.push(("head.offset".into(), self.head.c.view().into_dyn()));
        out
    }

    /// Mutable views in the order of [`Model::parameters`]. Writes bypass
    /// the cell constraints; callers project afterwards when needed.
    pub fn parameters_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Layer { linear, activation, .. } = layer;
            match linear {
                LinearOp::Dense(t) => {
                    out.push((format!("layers.{i}.weight"), t.w.view_mut().into_dyn()));
                    out.push((format!("layers.{i}.offset"), t.c.view_mut().into_dyn()));
                }
                LinearOp::Conv2D(c) => {
                    out.push((format!("layers.{i}.kernel"), c.kernel.view_mut().into_dyn()));
                    out.push((format!("layers.{i}.bias"), c.bias.view_mut().into_dyn()));
                }
            }
            if let Activation::QMetric(cell) = activation {
                out.push((format!("layers.{i}.coupling"), cell.wt.view_mut().into_dyn()));
                out.push((format!("layers.{i}.gain"), cell.h.view_mut().into_dyn()));
                out.push((format!("layers.{i}.threshold"), cell.b.view_mut().into_dyn()));
            }
        }
        out.push(("head.weight".into(), self.head.w.view_mut().into_dyn()));
        out.push(("head.offset".into(), self.head.c.view_mut().into_dyn()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters()
            .into_iter()
            .flat_map(|(_, a)| a.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        let total = self.parameter_count();
        if values.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameter values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, mut view) in self.parameters_mut() {
            for v in view.iter_mut() {
                *v = values[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

pub(crate) const CELL_PARAM_NAMES: [&str; 3] = ["coupling", "gain", "threshold"];

pub fn argmax_columns(logits: ArrayView2<f64>) -> Vec<usize> {
    logits
        .columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
