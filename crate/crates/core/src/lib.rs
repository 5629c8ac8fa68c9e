//! Deep transform and metric learning.
//!
//! Sparse coding over a synthesis dictionary equals a proximity operator in
//! the metric `Q = DᵀD + αI` applied to a linearly transformed signal. This
//! crate computes that prox as an unrolled recurrent iteration, checks it
//! against independent solvers, and trains networks that alternate linear
//! transforms with such Q-Metric activations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod instances;
pub mod linalg;
pub mod metric;
pub mod net;
pub mod qprox;
pub mod sdl;
pub mod train;

pub use error::{Error, Result};
pub use metric::{
    metric_from_dictionary, transform_from_dictionary, validate_spd, AffineTransform, Dictionary, QMetric, Regularizer,
    RnnCell, SpdReport,
};
