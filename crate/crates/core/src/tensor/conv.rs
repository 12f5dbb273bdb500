// im2col-based convolution kernels. All images are single samples laid out
// as [C, H, W]; the batch loop lives in the tape ops.

use super::Real;
use crate::error::{Error, Result};

/// Output extent of a strided, padded cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "output extent ({input} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of the transposed convolution, i.e. the input extent of the
/// forward convolution it is the adjoint of.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::Config(format!(
            "transposed convolution with padding {padding} leaves no output"
        )));
    }
    Ok(full - 2 * padding)
}

/// Geometry of one correlation: an image of `c x h x w` against
/// `kh x kw` kernels, producing `ho x wo` positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output positions `[lo, hi)` along an axis of length `extent` whose
    /// source index for kernel tap `k` is in bounds, for output length `out`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // source = o * stride + k - pad must lie in [0, extent).
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if extent + self.pad > k { (extent + self.pad - k - 1) / self.stride + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }
}

pub(crate) fn im2col<T: Real>(img: &[T], g: &Geom, col: &mut [T]) {
    let cols = g.cols();
    debug_assert_eq!(col.len(), g.rows() * cols);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, g.wo);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst[..y0 * g.wo].fill(T::zero());
                dst[y1 * g.wo..].fill(T::zero());
                for oy in y0..y1 {
                    let y = oy * g.stride + ki - g.pad;
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    out_row[..x0].fill(T::zero());
                    out_row[x1..].fill(T::zero());
                    let first = x0 * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[x0..x1].copy_from_slice(&src[first..first + (x1 - x0)]);
                    } else {
                        for (i, v) in out_row[x0..x1].iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into image layout (adjoint of `im2col`).
pub(crate) fn col2im_add<T: Real>(col: &[T], g: &Geom, img: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, g.wo);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in y0..y1 {
                    let y = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[y * g.w..(y + 1) * g.w];
                    let first = x0 * g.stride + kj - g.pad;
                    let s = &src[oy * g.wo + x0..oy * g.wo + x1];
                    if g.stride == 1 {
                        dst[first..first + s.len()].iter_mut().zip(s).for_each(|(d, &v)| *d += v);
                    } else {
                        for (i, &v) in s.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[F, cols] = weight[F, rows] * col[rows, cols]`.
pub(crate) fn weight_times_col<T: Real>(weight: &[T], f: usize, g: &Geom, col: &[T], out: &mut [T]) {
    let (k, n) = (g.rows(), g.cols());
    T::gemm(f, k, n, T::one(), weight, k as isize, 1, col, n as isize, 1, T::zero(), out, n as isize, 1);
}

/// `col[rows, cols] = weight^T * x[F, cols]`.
pub(crate) fn weight_t_times<T: Real>(weight: &[T], f: usize, g: &Geom, x: &[T], col: &mut [T]) {
    let (m, n) = (g.rows(), g.cols());
    T::gemm(m, f, n, T::one(), weight, 1, m as isize, x, n as isize, 1, T::zero(), col, n as isize, 1);
}

/// `dweight[F, rows] += dy[F, cols] * col^T`.
pub(crate) fn accumulate_weight_grad<T: Real>(dy: &[T], f: usize, g: &Geom, col: &[T], dweight: &mut [T]) {
    let (k, n) = (g.cols(), g.rows());
    T::gemm(f, k, n, T::one(), dy, k as isize, 1, col, 1, k as isize, T::one(), dweight, n as isize, 1);
}
