//! Convolution via im2col + GEMM, and max pooling.

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [channels, height, width] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::dim("convolution stride must be positive"));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Rows of the column matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the column matrix: `H'·W'`.
    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(ky, kx)`, if
    /// it falls inside the unpadded image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` column matrix.
pub fn im2col<T: Real>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * ncol);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] = plane[y * g.width + x] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [_, c, h, w] = input.dims4()?;
    let [_, kc, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(Error::dim(format!(
            "kernel {:?} expects {kc} channels, input {:?} has {c}",
            kernel.shape(),
            input.shape()
        )));
    }
    ConvGeometry::new([c, h, w], [kh, kw], stride, padding)
}

/// 2-D cross-correlation (no kernel flip) of `N×C×H×W` input with an
/// `F×C×kh×kw` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let n = input.batch();
    let f = kernel.batch();
    let (pl, ol) = (g.patch_len(), g.out_len());
    let img = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); pl * ol];
    let mut out = vec![T::zero(); n * f * ol];
    for s in 0..n {
        im2col(&input.data()[s * img..(s + 1) * img], &g, &mut cols);
        gemm(
            f,
            pl,
            ol,
            kernel.data(),
            false,
            &cols,
            false,
            &mut out[s * f * ol..(s + 1) * f * ol],
            false,
        );
    }
    Ok(Tensor::from_parts(vec![n, f, g.out_h(), g.out_w()], out))
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let n = input.batch();
    let f = kernel.batch();
    let (pl, ol) = (g.patch_len(), g.out_len());
    let img = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); pl * ol];
    let mut dinput = want_input.then(|| vec![T::zero(); input.len()]);
    let mut dkernel = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    for s in 0..n {
        let dy = &grad_out.data()[s * f * ol..(s + 1) * f * ol];
        if let Some(dk) = dkernel.as_mut() {
            im2col(&input.data()[s * img..(s + 1) * img], &g, &mut cols);
            gemm(f, ol, pl, dy, false, &cols, true, dk, true);
        }
        if let Some(dx) = dinput.as_mut() {
            gemm(pl, f, ol, kernel.data(), true, dy, false, &mut cols, false);
            col2im(&cols, &g, &mut dx[s * img..(s + 1) * img]);
        }
    }
    Ok((
        dinput.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        dkernel.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub size: usize,
    pub stride: usize,
}

/// Max pooling over each `N×C` plane. Returns the pooled tensor and, for
/// every output element, the flat input offset it was taken from (first
/// maximum wins).
pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    pool: PoolGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4()?;
    if pool.size == 0 || pool.stride == 0 || pool.size > h || pool.size > w {
        return Err(Error::dim(format!(
            "pool window {} with stride {} does not fit {h}×{w}",
            pool.size, pool.stride
        )));
    }
    let oh = (h - pool.size) / pool.stride + 1;
    let ow = (w - pool.size) / pool.stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * pool.stride * w + ox * pool.stride;
                for dy in 0..pool.size {
                    for dx in 0..pool.size {
                        let off = base + (oy * pool.stride + dy) * w + ox * pool.stride + dx;
                        if data[off] > data[best] {
                            best = off;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), idx))
}
