//! im2col convolution kernels (cross-correlation, no kernel flip).
//!
//! Each sample is lowered to a `[Cin*kh*kw, Ho*Wo]` column matrix and multiplied by the
//! kernel viewed as `[Cout, Cin*kh*kw]`. Samples are processed in order, so reductions
//! always run in the same sequence for a given shape.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[co, ci, kh, kw]) = (input, kernel) else {
            return Err(Error::dim(format!(
                "conv2d expects [N,C,H,W] input and [Cout,Cin,kh,kw] kernel, got {input:?} and {kernel:?}"
            )));
        };
        if ci != c {
            return Err(Error::dim(format!(
                "conv2d kernel consumes {ci} channels, input has {c}"
            )));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::dim("conv2d needs kernel extents and stride >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// A 1x1, stride-1, unpadded convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, img: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let (k, p) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * g.out_channels * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let img = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(&g, img, &mut col);
            &col
        };
        let dst = &mut out[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        T::gemm(
            g.out_channels,
            k,
            p,
            T::one(),
            kernel.data(),
            k,
            1,
            cols,
            p,
            1,
            T::zero(),
            dst,
            p,
            1,
        );
    }
    Tensor::new(&g.output_shape(), out)
}

/// Input and kernel gradients, each present only when requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim("conv2d gradient shape mismatch"));
    }
    let (k, p) = (g.patch_len(), g.out_plane());
    let mut d_in = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut d_k = want_kernel.then(|| vec![T::zero(); kernel.numel()]);
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let dy = &grad_out.data()[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        if let Some(dk) = d_k.as_mut() {
            let img = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(&g, img, &mut col);
                &col
            };
            // dK[Cout, K] += dY[Cout, P] * cols[K, P]^T
            T::gemm(
                g.out_channels,
                p,
                k,
                T::one(),
                dy,
                p,
                1,
                cols,
                1,
                p,
                T::one(),
                dk,
                k,
                1,
            );
        }
        if let Some(dx) = d_in.as_mut() {
            let dst = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    kernel.data(),
                    1,
                    k,
                    dy,
                    p,
                    1,
                    T::zero(),
                    dst,
                    p,
                    1,
                );
            } else {
                // dcol[K, P] = K^T[K, Cout] * dY[Cout, P]
                T::gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    kernel.data(),
                    1,
                    k,
                    dy,
                    p,
                    1,
                    T::zero(),
                    &mut dcol,
                    p,
                    1,
                );
                col2im(&g, &dcol, dst);
            }
        }
    }
    Ok((
        d_in.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        d_k.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_extent() {
        let g = ConvGeometry::new(&[2, 3, 8, 8], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [2, 4, 4, 4]);
        let g = ConvGeometry::new(&[1, 1, 5, 7], &[1, 1, 3, 3], 1, 0).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 3, 5]);
    }

    #[test]
    fn geometry_rejects_bad_shapes() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 0, 1).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4], &[1, 1, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry::new(&[1, 2, 5, 4], &[1, 2, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..g.in_sample()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.out_plane())
            .map(|i| (i as f64 * 0.91).cos())
            .collect();
        let mut col = vec![0.0; c.len()];
        im2col(&g, &x, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
