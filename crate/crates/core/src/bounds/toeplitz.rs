//! Lowering 2-D convolutions to dense matrices.
//!
//! A convolution is linear in its input, so it equals multiplication by a
//! doubly block Toeplitz matrix. Once lowered, every dense bound applies,
//! with the layer radius applied to each entry of the lowered matrix.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Kernel of shape `(out_channels, in_channels, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = out_channels * in_channels * height * width;
        if n == 0 {
            return Err(Error::InvalidConfig("kernel has a zero dimension".into()));
        }
        if weights.len() != n {
            return Err(Error::dimension("ConvKernel::new", n, weights.len()));
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            height,
            width,
            weights,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        self.weights[((o * self.in_channels + c) * self.height + i) * self.width + j]
    }
}

/// Input shape `(channels, height, width)` plus stride and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// `(out_height, out_width)` for a `kh × kw` kernel.
    pub fn output_size(&self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if kh > ph || kw > pw {
            return Err(Error::InvalidConfig(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Dense `T` with `T · vec(x) = vec(conv(x))`.
///
/// Inputs and outputs are flattened channel-major (`c, row, col`). The
/// convolution is a cross-correlation, as in common deep-learning libraries.
pub fn conv_to_toeplitz(kernel: &ConvKernel, geometry: ConvGeometry) -> Result<Matrix> {
    let (oc, ic, kh, kw) = kernel.shape();
    if ic != geometry.channels {
        return Err(Error::dimension(
            "conv_to_toeplitz channels",
            geometry.channels,
            ic,
        ));
    }
    let (oh, ow) = geometry.output_size(kh, kw)?;
    let (h, w) = (geometry.height, geometry.width);
    let pad = geometry.padding as isize;
    let mut t = Matrix::zeros(oc * oh * ow, ic * h * w);
    for o in 0..oc {
        for r in 0..oh {
            for s in 0..ow {
                let row = (o * oh + r) * ow + s;
                for c in 0..ic {
                    for i in 0..kh {
                        let y = (r * geometry.stride + i) as isize - pad;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let x = (s * geometry.stride + j) as isize - pad;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let col = (c * h + y as usize) * w + x as usize;
                            t[(row, col)] += kernel.get(o, c, i, j);
                        }
                    }
                }
            }
        }
    }
    Ok(t)
}
