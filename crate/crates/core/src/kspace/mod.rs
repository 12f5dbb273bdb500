//! Complex images, centered Fourier transforms, Cartesian undersampling and
//! the acquisition model `y = M (F x + noise)`.

mod fft;
pub mod io;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DcMode, Real, Tensor};

pub use fft::CenteredFft2;

/// A 2D complex array: an MR image or its k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    real: Vec<f64>,
    imag: Vec<f64>,
    /// Peak magnitude used as the PSNR reference.
    pub intensity_scale: f64,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, real: Vec<f64>, imag: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if real.len() != height * width || imag.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} values per channel, got {} / {}",
                height * width,
                real.len(),
                imag.len()
            )));
        }
        Ok(Self { height, width, real, imag, intensity_scale: 1.0 })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, real: vec![0.0; height * width], imag: vec![0.0; height * width], intensity_scale: 1.0 }
    }

    pub fn from_real(height: usize, width: usize, real: Vec<f64>) -> Result<Self> {
        Self::new(height, width, real, vec![0.0; height * width])
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.intensity_scale = scale;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn imag(&self) -> &[f64] {
        &self.imag
    }

    pub fn real_mut(&mut self) -> &mut [f64] {
        &mut self.real
    }

    pub fn imag_mut(&mut self) -> &mut [f64] {
        &mut self.imag
    }

    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.width + col;
        (self.real[i], self.imag[i])
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.real.iter().zip(&self.imag).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.real.iter().chain(&self.imag).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ComplexImage) -> f64 {
        self.real
            .iter()
            .chain(&self.imag)
            .zip(other.real.iter().chain(&other.imag))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: (usize, usize), what: &str) -> Result<()> {
        if (self.height, self.width) != other {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.0, other.1
            )));
        }
        Ok(())
    }

    /// The 2-channel `[2, H, W]` real view (channel 0 real, channel 1 imaginary).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.real.iter().chain(&self.imag).map(|&v| T::of(v)).collect();
        Tensor::new(vec![2, self.height, self.width], data).expect("consistent by construction")
    }

    /// Inverse of [`ComplexImage::to_tensor`]; accepts `[2, H, W]` or `[1, 2, H, W]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [2, h, w] | [1, 2, h, w] => (h, w),
            ref s => return Err(Error::Shape(format!("expected a 2-channel image tensor, got {s:?}"))),
        };
        let d = t.data();
        Self::new(h, w, d[..h * w].iter().map(|v| v.f64()).collect(), d[h * w..].iter().map(|v| v.f64()).collect())
    }

    /// Stacks images into a `[B, 2, H, W]` batch.
    pub fn batch<T: Real>(images: &[&ComplexImage]) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
        Tensor::stack(&parts)
    }

    /// Splits a `[B, 2, H, W]` batch back into images.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<ComplexImage>> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("expected [B, 2, H, W], got {:?}", t.shape())));
        }
        (0..t.shape()[0]).map(|i| Self::from_tensor(&t.index_outer(i))).collect()
    }
}

/// Unitary centered forward transform.
pub fn fft2_centered(img: &ComplexImage) -> ComplexImage {
    let mut out = img.clone();
    CenteredFft2::<f64>::new(img.height, img.width).forward(&mut out.real, &mut out.imag);
    out
}

/// Unitary centered inverse transform.
pub fn ifft2_centered(ksp: &ComplexImage) -> ComplexImage {
    let mut out = ksp.clone();
    CenteredFft2::<f64>::new(ksp.height, ksp.width).inverse(&mut out.real, &mut out.imag);
    out
}

/// Cartesian line mask: a column is either fully sampled or not at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    kept: Vec<bool>,
}

impl SamplingMask {
    pub fn from_columns(height: usize, kept: Vec<bool>) -> Result<Self> {
        if height == 0 || kept.is_empty() {
            return Err(Error::Shape("empty mask".into()));
        }
        Ok(Self { height, width: kept.len(), kept })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, kept: vec![true; width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, kept: vec![false; width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn sampling_ratio(&self) -> f64 {
        self.kept_count() as f64 / self.width as f64
    }

    /// Whether k-space location `(row, col)` is sampled.
    pub fn contains(&self, _row: usize, col: usize) -> bool {
        self.kept[col]
    }
}

/// Number of columns a mask of `ratio` keeps.
pub fn column_budget(width: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("sampling ratio must lie in (0, 1], got {ratio}")));
    }
    let budget = (ratio * width as f64 + 1e-9).floor() as usize;
    if budget < 1 {
        return Err(Error::Config(format!("ratio {ratio} keeps no column of width {width}")));
    }
    Ok(budget.min(width))
}

/// Width of the always-sampled low-frequency band.
pub fn center_band(width: usize, budget: usize) -> usize {
    4.max(width / 32).min(budget)
}

/// Random 1D-Gaussian column mask keeping `floor(ratio * width)` columns.
///
/// The `center_band` columns nearest the zero frequency (column `width / 2`)
/// are always kept; the rest are drawn without replacement with weights
/// `exp(-d^2 / (2 sigma^2))`, `d` the distance to the zero frequency and
/// `sigma = width / 6`.
pub fn generate_mask<R: Rng + ?Sized>(width: usize, height: usize, ratio: f64, rng: &mut R) -> Result<SamplingMask> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("empty mask {height}x{width}")));
    }
    let budget = column_budget(width, ratio)?;
    let center = (width / 2) as f64;
    let mut by_distance: Vec<usize> = (0..width).collect();
    by_distance.sort_by(|&a, &b| {
        let (da, db) = ((a as f64 - center).abs(), (b as f64 - center).abs());
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let mut kept = vec![false; width];
    let band = center_band(width, budget);
    by_distance[..band].iter().for_each(|&c| kept[c] = true);

    let sigma = width as f64 / 6.0;
    let mut candidates: Vec<(usize, f64)> = by_distance[band..]
        .iter()
        .map(|&c| {
            let d = c as f64 - center;
            (c, (-d * d / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    candidates.sort_by_key(|&(c, _)| c);
    for _ in band..budget {
        let total: f64 = candidates.iter().map(|&(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = candidates.len() - 1;
        for (i, &(_, w)) in candidates.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (c, _) = candidates.remove(pick);
        kept[c] = true;
    }
    Ok(SamplingMask { height, width, kept })
}

/// One simulated acquisition: masked, noisy k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSample {
    measurements: ComplexImage,
    mask: SamplingMask,
    pub noise_std: f64,
}

impl KSpaceSample {
    /// Builds a sample from raw k-space, zeroing everything outside the mask.
    pub fn new(mut measurements: ComplexImage, mask: SamplingMask, noise_std: f64) -> Result<Self> {
        measurements.check_same_shape((mask.height, mask.width), "k-space vs mask")?;
        let w = mask.width;
        for (i, (re, im)) in measurements.real.iter_mut().zip(measurements.imag.iter_mut()).enumerate() {
            if !mask.kept[i % w] {
                *re = 0.0;
                *im = 0.0;
            }
        }
        Ok(Self { measurements, mask, noise_std })
    }

    pub fn measurements(&self) -> &ComplexImage {
        &self.measurements
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// `y = M (F x + e)` with complex Gaussian `e` whose real and imaginary parts
/// each have standard deviation `noise_std / sqrt(2)`.
pub fn acquire<R: Rng + ?Sized>(
    x: &ComplexImage,
    mask: &SamplingMask,
    noise_std: f64,
    rng: &mut R,
) -> Result<KSpaceSample> {
    x.check_same_shape((mask.height, mask.width), "image vs mask")?;
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut k = fft2_centered(x);
    if noise_std > 0.0 {
        let dist = Normal::new(0.0, noise_std / std::f64::consts::SQRT_2).expect("valid std");
        for (re, im) in k.real.iter_mut().zip(k.imag.iter_mut()) {
            *re += dist.sample(rng);
            *im += dist.sample(rng);
        }
    }
    KSpaceSample::new(k, mask.clone(), noise_std)
}

/// `x_u = F^H y`.
pub fn zero_fill(sample: &KSpaceSample) -> ComplexImage {
    ifft2_centered(&sample.measurements)
}

/// Enforces agreement with the measurements at sampled k-space locations.
pub fn data_consistency(x_net: &ComplexImage, sample: &KSpaceSample, mode: DcMode) -> Result<ComplexImage> {
    x_net.check_same_shape((sample.height(), sample.width()), "data_consistency")?;
    let keep = match mode {
        DcMode::Replace => 0.0,
        DcMode::NoiseWeighted { lambda } => 1.0 / (1.0 + lambda),
    };
    let mut k = fft2_centered(x_net);
    let y = &sample.measurements;
    let w = x_net.width;
    for i in 0..k.len() {
        if sample.mask.kept[i % w] {
            k.real[i] = keep * k.real[i] + (1.0 - keep) * y.real[i];
            k.imag[i] = keep * k.imag[i] + (1.0 - keep) * y.imag[i];
        }
    }
    Ok(ifft2_centered(&k).with_scale(x_net.intensity_scale))
}
