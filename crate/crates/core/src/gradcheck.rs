//! Central finite-difference verification of tape gradients in `f64`.
//!
//! Only forward evaluations are used to form the reference derivatives, so
//! the check is independent of every backward rule it verifies.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Binder, ParamSet, Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Number of compared derivatives.
    pub checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst derivative; `usize::MAX` marks a
    /// directional derivative.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, rel: f64, at: (usize, usize)) {
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some(at);
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Which derivatives to compare.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    /// Every coordinate of every input.
    All,
    /// `n` random coordinates across all inputs plus one random directional
    /// derivative along all of them at once.
    Sampled(usize),
}

const RETRY_STEPS: [f64; 3] = [1.0 / 16.0, 16.0, 256.0];

/// Relative error with a floor that keeps near-zero derivatives from
/// dominating through round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of `f(inputs)` against central differences.
///
/// `f` builds a scalar loss from the inputs, recorded as tape variables.
/// A derivative that fails at step `eps` is retried at `eps / 16`, `eps * 16`
/// and `eps * 256`, keeping the best agreement. The narrow stencil avoids
/// kinks of piecewise operations; the wide ones avoid round-off on
/// derivatives that are small next to the loss itself.
pub fn check<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    coverage: Coverage,
    eps: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let coord_fd = |i: usize, j: usize, h: f64| -> Result<f64> {
        let mut xs = inputs.to_vec();
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + h;
        let up = eval(&xs)?;
        xs[i].data_mut()[j] = orig - h;
        let down = eval(&xs)?;
        Ok((up - down) / (2.0 * h))
    };

    let mut report = GradCheckReport::default();
    let coords: Vec<(usize, usize)> = match coverage {
        Coverage::All => inputs.iter().enumerate().flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j))).collect(),
        Coverage::Sampled(n) => {
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let picks = sample(rng, total, n.min(total));
            picks
                .into_iter()
                .map(|mut flat| {
                    let mut i = 0;
                    while flat >= inputs[i].numel() {
                        flat -= inputs[i].numel();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };
    for (i, j) in coords {
        let a = analytic[i][j];
        let mut rel = relative_error(a, coord_fd(i, j, eps)?);
        for h in RETRY_STEPS {
            if rel > tol {
                rel = rel.min(relative_error(a, coord_fd(i, j, eps * h)?));
            }
        }
        report.record(rel, (i, j));
    }

    if let Coverage::Sampled(_) = coverage {
        let dir: Vec<Vec<f64>> = inputs.iter().map(|x| (0..x.numel()).map(|_| StandardNormal.sample(rng)).collect()).collect();
        let norm = dir.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
        let a: f64 = analytic.iter().flatten().zip(dir.iter().flatten()).map(|(g, d)| g * d / norm).sum();
        let dir_fd = |h: f64| -> Result<f64> {
            let shifted = |sign: f64| -> Vec<Tensor<f64>> {
                inputs
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| {
                        let mut y = x.clone();
                        y.data_mut().iter_mut().zip(d).for_each(|(v, d)| *v += sign * h * d / norm);
                        y
                    })
                    .collect()
            };
            Ok((eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * h))
        };
        let mut rel = relative_error(a, dir_fd(eps)?);
        for h in RETRY_STEPS {
            if rel > tol {
                rel = rel.min(relative_error(a, dir_fd(eps * h)?));
            }
        }
        report.record(rel, (usize::MAX, usize::MAX));
    }
    Ok(report)
}

/// [`check`] over the parameters of a network as well as extra inputs.
///
/// `f` receives a binder whose parameters are pre-bound to tape variables
/// and the variables of `inputs`. Inputs are numbered first in the report,
/// then parameters in name order.
pub fn check_params<F, R>(
    params: &ParamSet<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    coverage: Coverage,
    eps: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &mut Binder<'_, f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let names: Vec<String> = params.params().map(|p| p.name.clone()).collect();
    let mut all = inputs.to_vec();
    all.extend(params.params().map(|p| p.tensor.clone()));
    let n_in = inputs.len();
    check(
        |tape, vars| {
            let mut binder = Binder::frozen(params);
            for (name, v) in names.iter().zip(&vars[n_in..]) {
                binder.prebind(name, *v);
            }
            f(tape, &mut binder, &vars[..n_in])
        },
        &all,
        coverage,
        eps,
        tol,
        rng,
    )
}
