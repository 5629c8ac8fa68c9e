use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};

/// Batch of activations flowing between layers.
///
/// `Flat` stores one sample per column (features × N). `Spatial` stores
/// image-like tensors as `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Flat(Array2<f64>),
    Spatial(Array4<f64>),
}

impl Signal {
    pub fn batch(&self) -> usize {
        match self {
            Signal::Flat(a) => a.ncols(),
            Signal::Spatial(a) => a.shape()[0],
        }
    }

    /// Shape of a single sample: `[F]` or `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Signal::Flat(a) => vec![a.nrows()],
            Signal::Spatial(a) => a.shape()[1..].to_vec(),
        }
    }

    pub fn as_flat(&self) -> Option<&Array2<f64>> {
        match self {
            Signal::Flat(a) => Some(a),
            Signal::Spatial(_) => None,
        }
    }

    pub fn into_flat(self) -> Result<Array2<f64>> {
        match self {
            Signal::Flat(a) => Ok(a),
            Signal::Spatial(a) => Err(Error::Shape(format!(
                "expected flat features, got spatial tensor {:?}",
                a.shape()
            ))),
        }
    }

    pub fn as_spatial(&self) -> Option<&Array4<f64>> {
        match self {
            Signal::Spatial(a) => Some(a),
            Signal::Flat(_) => None,
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            Signal::Flat(a) => Box::new(a.iter()),
            Signal::Spatial(a) => Box::new(a.iter()),
        }
    }

    /// One row per sample, each row the sample flattened in row-major order.
    pub fn to_sample_rows(&self) -> Array2<f64> {
        match self {
            Signal::Flat(a) => a.t().as_standard_layout().into_owned(),
            Signal::Spatial(a) => {
                let n = a.shape()[0];
                let f = a.len() / n.max(1);
                a.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, f))
                    .expect("standard layout reshape")
            }
        }
    }

    /// Inverse of [`Signal::to_sample_rows`] for a given per-sample shape.
    pub fn from_sample_rows(rows: Array2<f64>, shape: &[usize]) -> Result<Self> {
        let f: usize = shape.iter().product();
        if rows.ncols() != f {
            return Err(Error::Shape(format!(
                "rows have {} entries, shape {:?} needs {f}",
                rows.ncols(),
                shape
            )));
        }
        match shape {
            [_] => Ok(Signal::Flat(rows.reversed_axes().as_standard_layout().into_owned())),
            [c, h, w] => {
                let n = rows.nrows();
                Ok(Signal::Spatial(
                    rows.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((n, *c, *h, *w))
                        .expect("standard layout reshape"),
                ))
            }
            _ => Err(Error::Shape(format!(
                "sample shape must have 1 or 3 axes, got {shape:?}"
            ))),
        }
    }
}

/// `[N, C, H, W]` → `C × (N·H·W)`, columns ordered by (n, h, w).
pub(crate) fn channels_as_columns(a: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = a.dim();
    a.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("standard layout reshape")
}

/// Inverse of [`channels_as_columns`].
pub(crate) fn columns_as_channels(m: Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    m.into_shape_with_order((c, n, h, w))
        .expect("column count matches N·H·W")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

pub(crate) fn sum_columns(m: &Array2<f64>) -> ndarray::Array1<f64> {
    m.sum_axis(Axis(1))
}
