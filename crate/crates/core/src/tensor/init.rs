//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Parameter, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Semi-orthogonal matrix after reshaping to `shape[0] x rest`.
    Orthogonal,
    Gaussian { mean: f64, std: f64 },
    Zeros,
    Scalar { value: f64 },
}

pub fn initialize<T: Real, R: Rng + ?Sized>(param: &mut Parameter<T>, scheme: InitScheme, rng: &mut R) {
    let n = param.tensor.numel();
    let values: Vec<f64> = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Scalar { value } => vec![value; n],
        InitScheme::Gaussian { mean, std } => {
            let dist = Normal::new(mean, std).expect("finite, non-negative std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        InitScheme::Orthogonal => {
            let rows = param.tensor.shape()[0];
            orthogonal(rows, n / rows, rng)
        }
    };
    param.tensor.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d = T::of(v));
}

/// Row-major `rows x cols` matrix with orthonormal rows (if `rows <= cols`)
/// or orthonormal columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    // Two passes of modified Gram-Schmidt keep the residual at round-off.
    for _ in 0..2 {
        for i in 0..short {
            for j in 0..i {
                let (done, rest) = basis.split_at_mut(i);
                let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[j]).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = basis[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            basis[i].iter_mut().for_each(|a| *a /= norm);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in basis.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}
