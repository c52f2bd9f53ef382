//! im2col-based 2-d convolution and its transpose, forward and backward.
//!
//! All batched products go through a single GEMM whose reduction order does
//! not depend on how many worker threads exist, so results are bit-stable.

use rayon::prelude::*;

use super::{gemm, Element, Mat};
use crate::error::{Error, Result};

pub fn conv2d_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_out_side(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || input == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Sliding-window geometry: an image of `c x h x w` scanned by a `kh x kw`
/// window producing an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source pixel for window position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// `[n, c, h, w]` images to `[n * positions, patch]` rows.
fn im2col<T: Element>(src: &[T], n: usize, win: &Window) -> Vec<T> {
    let p = win.positions();
    let k = win.patch();
    let img = win.c * win.h * win.w;
    let mut cols = vec![T::zero(); n * p * k];
    cols.par_chunks_mut(p * k)
        .zip(src.par_chunks(img))
        .for_each(|(dst, image)| {
            for oy in 0..win.oh {
                for ox in 0..win.ow {
                    let row = &mut dst[(oy * win.ow + ox) * k..][..k];
                    for c in 0..win.c {
                        let plane = &image[c * win.h * win.w..][..win.h * win.w];
                        for ky in 0..win.kh {
                            for kx in 0..win.kw {
                                if let Some((y, x)) = win.src(oy, ox, ky, kx) {
                                    row[(c * win.kh + ky) * win.kw + kx] = plane[y * win.w + x];
                                }
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds rows back into `[n, c, h, w]` images.
fn col2im<T: Element>(cols: &[T], n: usize, win: &Window) -> Vec<T> {
    let p = win.positions();
    let k = win.patch();
    let img = win.c * win.h * win.w;
    let mut out = vec![T::zero(); n * img];
    out.par_chunks_mut(img)
        .zip(cols.par_chunks(p * k))
        .for_each(|(image, src)| {
            for oy in 0..win.oh {
                for ox in 0..win.ow {
                    let row = &src[(oy * win.ow + ox) * k..][..k];
                    for c in 0..win.c {
                        for ky in 0..win.kh {
                            for kx in 0..win.kw {
                                if let Some((y, x)) = win.src(oy, ox, ky, kx) {
                                    image[(c * win.h + y) * win.w + x] +=
                                        row[(c * win.kh + ky) * win.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `[n, c, p]` to `[c, n * p]`.
pub(crate) fn to_channel_major<T: Element>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let from = &src[(b * c + ch) * p..][..p];
            out[ch * n * p + b * p..][..p].copy_from_slice(from);
        }
    }
    out
}

/// `[c, n * p]` to `[n, c, p]`.
pub(crate) fn from_channel_major<T: Element>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&src[ch * n * p + b * p..][..p]);
        }
    }
    out
}

/// Validated shapes of a convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    /// Window over the "wide" side: the input for conv2d, the output for the transpose.
    pub win: Window,
    /// Channel count of the "narrow" side.
    pub narrow_c: usize,
}

impl ConvDims {
    pub fn conv2d(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, ci, h, w] = super::nchw(input, "conv2d input")?;
        let [co, wi, kh, kw] = super::nchw(weight, "conv2d weight")?;
        if ci != wi {
            return Err(Error::shape(format!(
                "conv2d input {input:?} has {ci} channels but weight {weight:?} expects {wi}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1"));
        }
        let (oh, ow) = match (
            conv2d_out_side(h, kh, stride, pad),
            conv2d_out_side(w, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {weight:?} larger than padded input {input:?}"
                )))
            }
        };
        Ok(ConvDims {
            n,
            win: Window {
                c: ci,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            },
            narrow_c: co,
        })
    }

    pub fn conv_transpose2d(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, ci, h, w] = super::nchw(input, "conv_transpose2d input")?;
        let [wi, co, kh, kw] = super::nchw(weight, "conv_transpose2d weight")?;
        if ci != wi {
            return Err(Error::shape(format!(
                "conv_transpose2d input {input:?} has {ci} channels but weight {weight:?} expects {wi}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv_transpose2d stride must be >= 1"));
        }
        let (oh, ow) = match (
            conv_transpose2d_out_side(h, kh, stride, pad),
            conv_transpose2d_out_side(w, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(format!(
                    "conv_transpose2d padding {pad} too large for input {input:?} and weight {weight:?}"
                )))
            }
        };
        // The transpose is the adjoint of a conv2d over the output grid.
        let win = Window {
            c: co,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        Ok(ConvDims {
            n,
            win,
            narrow_c: ci,
        })
    }

    pub fn conv2d_out_shape(&self) -> [usize; 4] {
        [self.n, self.narrow_c, self.win.oh, self.win.ow]
    }

    pub fn transpose_out_shape(&self) -> [usize; 4] {
        [self.n, self.win.c, self.win.h, self.win.w]
    }
}

/// Forward conv2d. `weight` is `[co, ci, kh, kw]`.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let np = d.n * d.win.positions();
    let k = d.win.patch();
    let cols = im2col(x, d.n, &d.win);
    let mut y = vec![T::zero(); d.narrow_c * np];
    gemm(
        Mat::new(weight, d.narrow_c, k),
        Mat::new(&cols, np, k).t(),
        &mut y,
        T::zero(),
    );
    from_channel_major(&y, d.n, d.narrow_c, d.win.positions())
}

/// Gradients of conv2d: `(d_input, d_weight)`.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &ConvDims,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let np = d.n * d.win.positions();
    let k = d.win.patch();
    let dy_flat = to_channel_major(dy, d.n, d.narrow_c, d.win.positions());
    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); np * k];
        gemm(
            Mat::new(&dy_flat, d.narrow_c, np).t(),
            Mat::new(weight, d.narrow_c, k),
            &mut dcols,
            T::zero(),
        );
        col2im(&dcols, d.n, &d.win)
    });
    let dw = need_weight.then(|| {
        let cols = im2col(x, d.n, &d.win);
        let mut dw = vec![T::zero(); d.narrow_c * k];
        gemm(
            Mat::new(&dy_flat, d.narrow_c, np),
            Mat::new(&cols, np, k),
            &mut dw,
            T::zero(),
        );
        dw
    });
    (dx, dw)
}

/// Forward transposed conv. `weight` is `[ci, co, kh, kw]`.
pub(crate) fn conv_transpose2d_forward<T: Element>(x: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let np = d.n * d.win.positions();
    let k = d.win.patch();
    let x_flat = to_channel_major(x, d.n, d.narrow_c, d.win.positions());
    let mut cols = vec![T::zero(); np * k];
    gemm(
        Mat::new(&x_flat, d.narrow_c, np).t(),
        Mat::new(weight, d.narrow_c, k),
        &mut cols,
        T::zero(),
    );
    col2im(&cols, d.n, &d.win)
}

/// Gradients of the transposed conv: `(d_input, d_weight)`.
pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &ConvDims,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let np = d.n * d.win.positions();
    let k = d.win.patch();
    let cols = im2col(dy, d.n, &d.win);
    let dx = need_input.then(|| {
        let mut dx_flat = vec![T::zero(); d.narrow_c * np];
        gemm(
            Mat::new(weight, d.narrow_c, k),
            Mat::new(&cols, np, k).t(),
            &mut dx_flat,
            T::zero(),
        );
        from_channel_major(&dx_flat, d.n, d.narrow_c, d.win.positions())
    });
    let dw = need_weight.then(|| {
        let x_flat = to_channel_major(x, d.n, d.narrow_c, d.win.positions());
        let mut dw = vec![T::zero(); d.narrow_c * k];
        gemm(
            Mat::new(&x_flat, d.narrow_c, np),
            Mat::new(&cols, np, k),
            &mut dw,
            T::zero(),
        );
        dw
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sides() {
        assert_eq!(conv2d_out_side(8, 3, 2, 1), Some(4));
        assert_eq!(conv2d_out_side(64, 4, 2, 1), Some(32));
        assert_eq!(conv2d_out_side(2, 3, 1, 0), None);
        assert_eq!(conv_transpose2d_out_side(32, 4, 2, 1), Some(64));
        assert_eq!(conv_transpose2d_out_side(2, 2, 2, 0), Some(4));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let win = Window {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: conv2d_out_side(5, 3, 2, 1).unwrap(),
            ow: conv2d_out_side(4, 2, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, 2, &win);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let back = col2im(&c, 2, &win);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
