use crate::error::{Error, Result};

use super::signal::Signal;

/// Reinterprets each sample under a new shape with the same element count.
/// Elements keep their row-major position, so the index map is a bijection
/// and its gradient is the inverse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReshapeOp {
    input: Vec<usize>,
    output: Vec<usize>,
}

fn valid_rank(shape: &[usize]) -> bool {
    matches!(shape.len(), 1 | 3) && shape.iter().all(|&d| d > 0)
}

impl ReshapeOp {
    pub fn new(input: Vec<usize>, output: Vec<usize>) -> Result<Self> {
        if !valid_rank(&input) || !valid_rank(&output) {
            return Err(Error::Shape(format!(
                "reshape shapes must be [F] or [C, H, W] with positive sizes, got {input:?} -> {output:?}"
            )));
        }
        if input.iter().product::<usize>() != output.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "reshape {input:?} -> {output:?} changes the element count"
            )));
        }
        Ok(Self { input, output })
    }

    /// Flattens `[C, H, W]` (or any shape) to a single feature axis.
    pub fn flatten(input: Vec<usize>) -> Result<Self> {
        let f = input.iter().product();
        Self::new(input, vec![f])
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output
    }

    pub fn forward(&self, x: &Signal) -> Result<Signal> {
        Self::map(x, &self.input, &self.output)
    }

    pub fn backward(&self, grad: &Signal) -> Result<Signal> {
        Self::map(grad, &self.output, &self.input)
    }

    fn map(x: &Signal, from: &[usize], to: &[usize]) -> Result<Signal> {
        if x.sample_shape() != from {
            return Err(Error::Shape(format!(
                "reshape expects samples of shape {from:?}, got {:?}",
                x.sample_shape()
            )));
        }
        Signal::from_sample_rows(x.to_sample_rows(), to)
    }
}
