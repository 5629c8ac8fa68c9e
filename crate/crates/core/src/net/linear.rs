//! Linear parts of a layer: dense affine maps and 2-D convolutions.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};
use crate::metric::AffineTransform;

use super::signal::{sum_columns, Signal};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D {
    pub(crate) kernel: Array4<f64>,
    pub(crate) bias: Array1<f64>,
    pub(crate) stride: usize,
    pub(crate) padding: usize,
}

impl Conv2D {
    /// `kernel` is `[out_ch, in_ch, kh, kw]`.
    pub fn new(kernel: Array4<f64>, bias: Array1<f64>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidParameter("stride must be positive".into()));
        }
        if bias.len() != kernel.shape()[0] {
            return Err(Error::Shape(format!(
                "bias has length {}, kernel has {} output channels",
                bias.len(),
                kernel.shape()[0]
            )));
        }
        if kernel.shape()[2] == 0 || kernel.shape()[3] == 0 {
            return Err(Error::Shape("kernel spatial size must be positive".into()));
        }
        if !kernel.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("convolution parameters".into()));
        }
        Ok(Self {
            kernel: kernel.as_standard_layout().into_owned(),
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> &Array4<f64> {
        &self.kernel
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output `(H', W')` for input `(H, W)`:
    /// `floor((H + 2·padding − kh)/stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn kernel_matrix(&self) -> Array2<f64> {
        let (o, c, kh, kw) = self.kernel.dim();
        self.kernel
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("kernel is standard layout")
            .to_owned()
    }

    fn im2col(&self, x: ArrayView3<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (kh, kw) = self.kernel_size();
        let pad = self.padding as isize;
        let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                cols[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Array3<f64> {
        let (kh, kw) = self.kernel_size();
        let pad = self.padding as isize;
        let mut x = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                x[[ch, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn check_input(&self, dim: (usize, usize, usize, usize)) -> Result<(usize, usize)> {
        let (_, c, h, w) = dim;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "input has {c} channels, kernel expects {}",
                self.in_channels()
            )));
        }
        self.output_hw(h, w)
    }
}

/// Cross-correlation of `input` (`[N, in_ch, H, W]`) with the kernel, plus
/// bias, computed through patch matrices.
pub fn conv2d_apply(op: &Conv2D, input: ArrayView4<f64>) -> Result<Array4<f64>> {
    let (oh, ow) = op.check_input(input.dim())?;
    let n = input.shape()[0];
    let kmat = op.kernel_matrix();
    let mut out = Array4::<f64>::zeros((n, op.out_channels(), oh, ow));
    for i in 0..n {
        let cols = op.im2col(input.slice(s![i, .., .., ..]), oh, ow);
        let mut y = kmat.dot(&cols);
        y += &op.bias.view().insert_axis(ndarray::Axis(1));
        out.slice_mut(s![i, .., .., ..]).assign(
            &y.into_shape_with_order((op.out_channels(), oh, ow))
                .expect("conv output reshape"),
        );
    }
    Ok(out)
}

/// Returns `(∂kernel, ∂bias, ∂input)` given `∂output`.
pub fn conv2d_backward(
    op: &Conv2D,
    input: ArrayView4<f64>,
    grad_out: ArrayView4<f64>,
) -> Result<(Array4<f64>, Array1<f64>, Array4<f64>)> {
    let (oh, ow) = op.check_input(input.dim())?;
    let (n, c, h, w) = input.dim();
    if grad_out.dim() != (n, op.out_channels(), oh, ow) {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            [n, op.out_channels(), oh, ow]
        )));
    }
    let kmat = op.kernel_matrix();
    let mut gk = Array2::<f64>::zeros(kmat.raw_dim());
    let mut gb = Array1::<f64>::zeros(op.out_channels());
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        let cols = op.im2col(input.slice(s![i, .., .., ..]), oh, ow);
        let g = grad_out
            .slice(s![i, .., .., ..])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((op.out_channels(), oh * ow))
            .expect("grad reshape");
        gk += &g.dot(&cols.t());
        gb += &sum_columns(&g);
        let gcols = kmat.t().dot(&g);
        gx.slice_mut(s![i, .., .., ..])
            .assign(&op.col2im(&gcols, c, h, w, oh, ow));
    }
    let gk = gk
        .into_shape_with_order(op.kernel.raw_dim())
        .expect("kernel grad reshape");
    Ok((gk, gb, gx))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOp {
    Dense(AffineTransform),
    Conv2D(Conv2D),
}

impl LinearOp {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LinearOp::Dense(t), [f]) if *f == t.in_dim() => Ok(vec![t.out_dim()]),
            (LinearOp::Dense(t), _) => Err(Error::Shape(format!(
                "dense layer expects [{}], got {input:?}",
                t.in_dim()
            ))),
            (LinearOp::Conv2D(op), [c, h, w]) if *c == op.in_channels() => {
                let (oh, ow) = op.output_hw(*h, *w)?;
                Ok(vec![op.out_channels(), oh, ow])
            }
            (LinearOp::Conv2D(op), _) => Err(Error::Shape(format!(
                "conv layer expects [{}, H, W], got {input:?}",
                op.in_channels()
            ))),
        }
    }

    pub fn forward(&self, x: &Signal) -> Result<Signal> {
        match (self, x) {
            (LinearOp::Dense(t), Signal::Flat(a)) if a.nrows() == t.in_dim() => Ok(Signal::Flat(t.apply(a.view()))),
            (LinearOp::Conv2D(op), Signal::Spatial(a)) => Ok(Signal::Spatial(conv2d_apply(op, a.view())?)),
            _ => Err(Error::Shape(format!(
                "linear op cannot take input of sample shape {:?}",
                x.sample_shape()
            ))),
        }
    }

    /// Returns parameter gradients (in [`LinearOp::parameter_names`] order)
    /// and the input gradient.
    pub fn backward(&self, x: &Signal, grad_out: &Signal) -> Result<(Vec<ndarray::ArrayD<f64>>, Signal)> {
        match (self, x, grad_out) {
            (LinearOp::Dense(t), Signal::Flat(a), Signal::Flat(g))
                if a.nrows() == t.in_dim() && g.nrows() == t.out_dim() && g.ncols() == a.ncols() =>
            {
                let gw = g.dot(&a.t());
                let gc = -sum_columns(g);
                let gx = t.w.t().dot(g);
                Ok((vec![gw.into_dyn(), gc.into_dyn()], Signal::Flat(gx)))
            }
            (LinearOp::Conv2D(op), Signal::Spatial(a), Signal::Spatial(g)) => {
                let (gk, gb, gx) = conv2d_backward(op, a.view(), g.view())?;
                Ok((vec![gk.into_dyn(), gb.into_dyn()], Signal::Spatial(gx)))
            }
            _ => Err(Error::StaleCache("linear op input/gradient shapes disagree".into())),
        }
    }

    pub fn parameter_names(&self) -> [&'static str; 2] {
        match self {
            LinearOp::Dense(_) => ["weight", "offset"],
            LinearOp::Conv2D(_) => ["kernel", "bias"],
        }
    }
}
