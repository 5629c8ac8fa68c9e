//! Networks of transform layers and Q-Metric activations.

pub mod activation;
pub mod gradcheck;
pub mod linear;
pub mod model;
pub mod reshape;
pub mod serialize;
pub mod signal;

pub use activation::{Activation, ActivationTrace};
pub use gradcheck::{check_model, finite_diff_check, GradCheckReport};
pub use linear::{conv2d_apply, conv2d_backward, Conv2D, LinearOp};
pub use model::{argmax_columns, ActivationKind, ForwardCache, Gradients, Layer, Model};
pub use reshape::ReshapeOp;
pub use serialize::{read_model, write_model, ModelFile};
pub use signal::Signal;
