use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Explicit zero padding per image edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Conv2dGeometry { stride, padding }
    }

    pub fn unit() -> Self {
        Conv2dGeometry::new(1, Padding::NONE)
    }
}

/// `floor((extent + pad_lo + pad_hi - kernel) / stride) + 1`, or `None` when the
/// padded extent is smaller than the kernel.
pub fn conv_output_extent(
    extent: usize,
    pad_lo: usize,
    pad_hi: usize,
    kernel: usize,
    stride: usize,
) -> Option<usize> {
    let padded = extent + pad_lo + pad_hi;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Resolved sizes of one convolution, from the point of view of the forward
/// (cross-correlation) direction: `big` is the conv input, `small` its output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvDims {
    pub fn resolve(
        input: &[usize],
        kernel_hw_c: (usize, usize, usize),
        geom: Conv2dGeometry,
    ) -> Result<Self> {
        let (kh, kw, kc) = kernel_hw_c;
        if input.len() != 4 || input[3] != kc {
            return Err(Error::shape("conv2d", input, &[kh, kw, kc]));
        }
        let p = geom.padding;
        let out_h = conv_output_extent(input[1], p.top, p.bottom, kh, geom.stride);
        let out_w = conv_output_extent(input[2], p.left, p.right, kw, geom.stride);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvDims {
                batch: input[0],
                in_h: input[1],
                in_w: input[2],
                in_c: input[3],
                out_h,
                out_w,
                kh,
                kw,
                stride: geom.stride,
                pad_top: p.top,
                pad_left: p.left,
            }),
            _ => Err(Error::shape("conv2d", input, &[kh, kw, kc])),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    /// Gathers receptive-field patches: `[rows, kh*kw*in_c]`.
    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let plen = self.patch_len();
        let mut cols = vec![T::zero(); self.rows() * plen];
        let c = self.in_c;
        let mut row = 0;
        for b in 0..self.batch {
            let img = &input[b * self.in_h * self.in_w * c..];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                let off = (ky * self.kw + kx) * c;
                                let src = (y * self.in_w + x) * c;
                                dst[off..off + c].copy_from_slice(&img[src..src + c]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Scatter-adds patches back onto an input-shaped buffer.
    pub fn col2im<T: Real>(&self, cols: &[T], out: &mut [T]) {
        let plen = self.patch_len();
        let c = self.in_c;
        let mut row = 0;
        for b in 0..self.batch {
            let base = b * self.in_h * self.in_w * c;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let src = &cols[row * plen..(row + 1) * plen];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                let off = (ky * self.kw + kx) * c;
                                let dst = base + (y * self.in_w + x) * c;
                                for (d, &s) in out[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
