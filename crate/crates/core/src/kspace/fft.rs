use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::Real;

/// Planned unitary, centered 2D DFT for one image size.
///
/// The zero frequency sits at index `(h / 2, w / 2)`; both directions are
/// scaled by `1 / sqrt(h * w)`.
#[derive(Clone)]
pub struct CenteredFft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for CenteredFft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CenteredFft2({}x{})", self.h, self.w)
    }
}

impl<T: Real> CenteredFft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn forward(&self, re: &mut [T], im: &mut [T]) {
        self.run(re, im, false);
    }

    pub fn inverse(&self, re: &mut [T], im: &mut [T]) {
        self.run(re, im, true);
    }

    fn run(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(re.len(), h * w);
        assert_eq!(im.len(), h * w);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };

        let mut buf = vec![Complex::new(T::zero(), T::zero()); h.max(w)];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); row.get_inplace_scratch_len().max(col.get_inplace_scratch_len())];

        // ifftshift -> DFT -> fftshift along each axis
        let (wf, wc) = (w / 2, w.div_ceil(2));
        for y in 0..h {
            let line = &mut buf[..w];
            for (i, v) in line.iter_mut().enumerate() {
                let s = y * w + (i + wf) % w;
                *v = Complex::new(re[s], im[s]);
            }
            row.process_with_scratch(line, &mut scratch);
            for i in 0..w {
                let v = line[(i + wc) % w];
                re[y * w + i] = v.re;
                im[y * w + i] = v.im;
            }
        }

        let (hf, hc) = (h / 2, h.div_ceil(2));
        for x in 0..w {
            let line = &mut buf[..h];
            for (i, v) in line.iter_mut().enumerate() {
                let s = ((i + hf) % h) * w + x;
                *v = Complex::new(re[s], im[s]);
            }
            col.process_with_scratch(line, &mut scratch);
            for i in 0..h {
                let v = line[(i + hc) % h];
                re[i * w + x] = v.re;
                im[i * w + x] = v.im;
            }
        }

        let norm = T::one() / T::of(((h * w) as f64).sqrt());
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
    }
}
