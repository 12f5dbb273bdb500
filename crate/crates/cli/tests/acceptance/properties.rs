//! Criteria that need no training: gradients, operator identities, metric
//! oracles and the replay/smoothing mechanics.

use std::collections::HashSet;

use anyhow::Result;
use csmri::gradcheck::{check, check_params, Coverage, GradCheckReport};
use csmri::kspace::{acquire, data_consistency, fft2_centered, generate_mask, ifft2_centered, ComplexImage, KSpaceSample};
use csmri::losses::{
    adversarial_loss, discriminator_loss, feature_matching_loss, l1_penalty, perceptual_loss, total_refiner_loss,
    LossCalibration, RefinerParts, ReplayBuffer,
};
use csmri::metrics::{dice, psnr, sis_from_dice, ssim, SsimConfig, SsimWindow};
use csmri::networks::{
    CascadeConfig, DiscriminatorConfig, FeatureConfig, FeatureExtractor, Mode, Preset, RefinerConfig, UNetConfig,
};
use csmri::tensor::{Activation, BnMode, DcMode, Real, Tape, Tensor, Var};
use csmri::training::{Stage, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const INSTANCES: u64 = 20;
const EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexImage {
    let re = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexImage::new(h, w, re, im).expect("shape")
}

fn sample(h: usize, w: usize, rng: &mut ChaCha8Rng) -> KSpaceSample {
    let x = image(h, w, rng);
    let ratio = [0.125, 0.25, 0.5][rng.random_range(0..3)];
    let mask = generate_mask(w, h, ratio, rng).expect("mask");
    let noise = if rng.random_bool(0.5) { 0.05 } else { 0.0 };
    acquire(&x, &mask, noise, rng).expect("acquire")
}

/// `sum(y * w)` for fixed random weights `w`, so every output element
/// receives a distinct upstream gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> csmri::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(t.shape(y).to_vec(), |_| r.random_range(-1.0..1.0));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Checks a tensor-valued function of `inputs` through a random projection.
fn op<F>(inputs: Vec<Tensor<f64>>, f: F, rng: &mut ChaCha8Rng) -> csmri::Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> csmri::Result<Var>,
{
    let seed = rng.random();
    check(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        },
        &inputs,
        Coverage::All,
        EPS,
        GRAD_TOL,
        rng,
    )
}

/// The smallest extent `>= min` that `k`, `stride`, `pad` tile exactly.
fn fitting(min: usize, k: usize, stride: usize, pad: usize) -> usize {
    (min..).find(|h| h + 2 * pad >= k && (h + 2 * pad - k) % stride == 0).expect("some extent fits")
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> csmri::Result<GradCheckReport>);

const SHAPE: [usize; 4] = [2, 3, 4, 4];

fn cases() -> Vec<Case> {
    vec![
        ("add", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&SHAPE, -1.0, 1.0, r)], |t, v| t.add(v[0], v[1]), r)),
        ("sub", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&SHAPE, -1.0, 1.0, r)], |t, v| t.sub(v[0], v[1]), r)),
        ("mul", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&SHAPE, -1.0, 1.0, r)], |t, v| t.mul(v[0], v[1]), r)),
        ("scale", |r| {
            let c = r.random_range(-2.0..2.0);
            op(vec![uniform(&SHAPE, -1.0, 1.0, r)], move |t, v| Ok(t.scale(v[0], c)), r)
        }),
        ("scale_by", |r| {
            op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&[1], -2.0, 2.0, r)], |t, v| t.scale_by(v[0], v[1]), r)
        }),
        ("sample_scale", |r| {
            let s = vec![r.random_range(0.1..3.0), r.random_range(0.1..3.0)];
            op(vec![uniform(&SHAPE, -1.0, 1.0, r)], move |t, v| t.sample_scale(v[0], s.clone()), r)
        }),
        ("conv2d", |r| {
            let (k, stride, pad) = [(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1), (3, 1, 0)][r.random_range(0..5)];
            let h = fitting(6, k, stride, pad);
            let x = uniform(&[2, 3, h, h], -1.0, 1.0, r);
            let w = uniform(&[4, 3, k, k], -0.5, 0.5, r);
            let b = uniform(&[4], -0.5, 0.5, r);
            op(vec![x, w, b], move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), r)
        }),
        ("conv_transpose2d", |r| {
            let (k, stride, pad) = [(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1), (2, 2, 0)][r.random_range(0..5)];
            let x = uniform(&[2, 4, 4, 4], -1.0, 1.0, r);
            let w = uniform(&[4, 3, k, k], -0.5, 0.5, r);
            let b = uniform(&[3], -0.5, 0.5, r);
            op(vec![x, w, b], move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad), r)
        }),
        ("batch_norm/train", |r| {
            let inputs = vec![uniform(&[3, 2, 3, 3], -1.0, 1.0, r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -0.5, 0.5, r)];
            op(inputs, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0), r)
        }),
        ("batch_norm/eval", |r| {
            let mean: Vec<f64> = (0..2).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..2).map(|_| r.random_range(0.2..2.0)).collect();
            let inputs = vec![uniform(&[3, 2, 3, 3], -1.0, 1.0, r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -0.5, 0.5, r)];
            op(
                inputs,
                move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.0),
                r,
            )
        }),
        ("leaky_relu", |r| {
            let slope = r.random_range(0.01..0.3);
            op(vec![uniform(&SHAPE, -1.0, 1.0, r)], move |t, v| Ok(t.activation(v[0], Activation::LeakyRelu { slope })), r)
        }),
        ("sigmoid", |r| op(vec![uniform(&SHAPE, -3.0, 3.0, r)], |t, v| Ok(t.activation(v[0], Activation::Sigmoid)), r)),
        ("tanh", |r| op(vec![uniform(&SHAPE, -3.0, 3.0, r)], |t, v| Ok(t.activation(v[0], Activation::Tanh)), r)),
        ("channel_scale", |r| {
            let f: Vec<f64> = (0..6).map(|_| r.random_range(0.1..2.0)).collect();
            op(vec![uniform(&SHAPE, -1.0, 1.0, r)], move |t, v| t.channel_scale(v[0], f.clone()), r)
        }),
        ("channel_dropout", |r| {
            let drop = ChaCha8Rng::seed_from_u64(r.random());
            op(
                vec![uniform(&SHAPE, -1.0, 1.0, r)],
                move |t, v| {
                    let mut d = drop.clone();
                    t.channel_dropout(v[0], 0.5, Some(&mut d))
                },
                r,
            )
        }),
        ("concat_channels", |r| {
            let inputs = vec![uniform(&[2, 2, 3, 3], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -1.0, 1.0, r)];
            op(inputs, |t, v| t.concat_channels(v[0], v[1]), r)
        }),
        ("repeat_channels", |r| op(vec![uniform(&[2, 1, 3, 3], -1.0, 1.0, r)], |t, v| t.repeat_channels(v[0], 3), r)),
        ("zero_pad", |r| {
            let pads = [r.random_range(0..3), r.random_range(0..3), r.random_range(0..3), r.random_range(0..3)];
            op(vec![uniform(&SHAPE, -1.0, 1.0, r)], move |t, v| t.zero_pad(v[0], pads), r)
        }),
        ("magnitude", |r| op(vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, r)], |t, v| t.magnitude(v[0]), r)),
        ("data_consistency/replace", |r| {
            let samples = vec![sample(8, 8, r), sample(8, 8, r)];
            op(vec![uniform(&[2, 2, 8, 8], -1.0, 1.0, r)], move |t, v| t.data_consistency(v[0], &samples, DcMode::Replace), r)
        }),
        ("data_consistency/weighted", |r| {
            let samples = vec![sample(8, 8, r), sample(8, 8, r)];
            let mode = DcMode::NoiseWeighted { lambda: r.random_range(0.1..10.0) };
            op(vec![uniform(&[2, 2, 8, 8], -1.0, 1.0, r)], move |t, v| t.data_consistency(v[0], &samples, mode), r)
        }),
        ("sum", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r)], |t, v| Ok(t.sum(v[0])), r)),
        ("mean", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r)], |t, v| Ok(t.mean(v[0])), r)),
        ("mse", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&SHAPE, -1.0, 1.0, r)], |t, v| t.mse(v[0], v[1]), r)),
        ("mean_abs_diff", |r| {
            op(vec![uniform(&SHAPE, -1.0, 1.0, r), uniform(&SHAPE, -1.0, 1.0, r)], |t, v| t.mean_abs_diff(v[0], v[1]), r)
        }),
        ("bce", |r| {
            let target = r.random_range(0.0..1.0);
            op(vec![uniform(&SHAPE, 0.05, 0.95, r)], move |t, v| Ok(t.bce(v[0], target, 1e-7, 1.0 - 1e-7)), r)
        }),
        ("bce_targets", |r| {
            let targets: Vec<f64> = (0..96).map(|_| r.random_range(0.0..1.0)).collect();
            op(vec![uniform(&SHAPE, 0.05, 0.95, r)], move |t, v| t.bce_targets(v[0], targets.clone(), 1e-7, 1.0 - 1e-7), r)
        }),
        ("loss/discriminator", |r| {
            let inputs = vec![uniform(&[2, 1, 4, 4], 0.05, 0.95, r), uniform(&[2, 1, 4, 4], 0.05, 0.95, r)];
            op(inputs, |t, v| discriminator_loss(t, v[0], v[1], 0.1), r)
        }),
        ("loss/adversarial", |r| op(vec![uniform(&[2, 1, 4, 4], 0.05, 0.95, r)], |t, v| Ok(adversarial_loss(t, v[0])), r)),
        ("loss/feature_matching", |r| {
            let inputs = vec![
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&[2, 5, 2, 2], -1.0, 1.0, r),
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&[2, 5, 2, 2], -1.0, 1.0, r),
            ];
            op(inputs, |t, v| feature_matching_loss(t, &v[..2], &v[2..]), r)
        }),
        ("loss/l1_penalty", |r| op(vec![uniform(&SHAPE, -1.0, 1.0, r)], |t, v| l1_penalty(t, v[0]), r)),
        ("loss/perceptual", |r| {
            let fx = FeatureExtractor::<f64>::new(FeatureConfig::default())?;
            let inputs = vec![uniform(&[1, 2, 16, 16], -1.0, 1.0, r), uniform(&[1, 2, 16, 16], -1.0, 1.0, r)];
            check(|t, v| perceptual_loss(t, &fx, v[0], v[1]), &inputs, Coverage::Sampled(60), EPS, GRAD_TOL, r)
        }),
        ("loss/total_refiner", |r| {
            let calib = LossCalibration {
                m: r.random_range(0.5..2.0),
                n: r.random_range(0.1..1.0),
                o: r.random_range(0.01..1.0),
                alpha: r.random_range(0.1..10.0),
                frozen: true,
            };
            let inputs = vec![
                uniform(&[2, 1, 4, 4], 0.05, 0.95, r),
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&SHAPE, -1.0, 1.0, r),
                uniform(&SHAPE, -1.0, 1.0, r),
            ];
            op(
                inputs,
                move |t, v| {
                    let parts = RefinerParts {
                        adv: adversarial_loss(t, v[0]),
                        feat: feature_matching_loss(t, &v[1..2], &v[2..3])?,
                        vgg: t.mse(v[3], v[4])?,
                        pen: l1_penalty(t, v[5])?,
                    };
                    total_refiner_loss(t, &parts, &calib)
                },
                r,
            )
        }),
        ("network/R", |r| {
            let cfg = CascadeConfig { filters: 6, ..CascadeConfig::default() };
            let params = cfg.init::<f64, _>(r)?;
            let samples = vec![sample(8, 8, r)];
            let x_u = uniform(&[1, 2, 8, 8], -1.0, 1.0, r);
            let seed = r.random();
            check_params(
                &params,
                &[x_u],
                |t, b, v| {
                    let y = cfg.forward(t, b, v[0], &samples)?;
                    project(t, y, seed)
                },
                Coverage::Sampled(60),
                EPS,
                GRAD_TOL,
                r,
            )
        }),
        ("network/V", |r| {
            let cfg = RefinerConfig {
                unet: UNetConfig { encoder: vec![4, 6, 8], decoder: vec![6, 4], ..UNetConfig::refiner() },
                gate_init: r.random_range(0.2..1.0),
            };
            let params = cfg.init::<f64, _>(r)?;
            let x = uniform(&[2, 2, 8, 8], -1.0, 1.0, r);
            let (s1, s2) = (r.random(), r.random());
            // The range normalization is detached, so the input enters as a
            // constant and the check covers the parameters.
            check_params(
                &params,
                &[],
                |t, b, _| {
                    let xc = t.constant(x.clone());
                    let out = cfg.forward(t, b, xc, Mode::Train)?;
                    let a = project(t, out.x_hat, s1)?;
                    let c = project(t, out.x_v, s2)?;
                    t.add(a, c)
                },
                Coverage::Sampled(60),
                EPS,
                GRAD_TOL,
                r,
            )
        }),
        ("network/D", |r| {
            let cfg = DiscriminatorConfig { filters: vec![3, 4, 5], ..DiscriminatorConfig::desk() };
            let mut params = cfg.init::<f64, _>(r)?;
            params.params_mut().for_each(|p| p.tensor.data_mut().iter_mut().for_each(|v| *v *= 20.0));
            let x = uniform(&[2, 2, 16, 16], -1.0, 1.0, r);
            let drop = ChaCha8Rng::seed_from_u64(r.random());
            let (s1, s2) = (r.random(), r.random());
            check_params(
                &params,
                &[x],
                |t, b, v| {
                    let mut d = drop.clone();
                    let out = cfg.forward(t, b, v[0], Some(&mut d))?;
                    let a = project(t, out.prob, s1)?;
                    let f = project(t, out.features[0], s2)?;
                    t.add(a, f)
                },
                Coverage::Sampled(60),
                EPS,
                GRAD_TOL,
                r,
            )
        }),
        ("network/segmenter", |r| {
            let cfg = UNetConfig { encoder: vec![3, 4, 5], decoder: vec![4, 3], ..UNetConfig::segmenter() };
            let params = cfg.init::<f64, _>(r)?;
            let x = uniform(&[2, 1, 8, 8], 0.0, 1.0, r);
            let labels: Vec<f64> = (0..128).map(|_| r.random_range(0..2) as f64).collect();
            check_params(
                &params,
                &[x],
                |t, b, v| {
                    let p = cfg.forward(t, b, v[0], Mode::Train)?;
                    t.bce_targets(p, labels.clone(), 1e-7, 1.0 - 1e-7)
                },
                Coverage::Sampled(60),
                EPS,
                GRAD_TOL,
                r,
            )
        }),
        ("network/feature_extractor", |r| {
            let fx = FeatureExtractor::<f64>::new(FeatureConfig::default())?;
            let seed = r.random();
            let x = uniform(&[1, 2, 16, 16], -1.0, 1.0, r);
            check(
                |t, v| {
                    let f = fx.forward(t, v[0])?;
                    project(t, f, seed)
                },
                &[x],
                Coverage::Sampled(60),
                EPS,
                GRAD_TOL,
                r,
            )
        }),
    ]
}

pub fn ac1() -> Result<Verdict> {
    let mut failed = Vec::new();
    let mut worst = (0.0, "");
    let mut checked = 0;
    let cases = cases();
    for (k, (name, case)) in cases.iter().enumerate() {
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * k as u64 + i);
            let report = case(&mut rng).map_err(|e| anyhow::anyhow!("{name}: {e}"))?;
            checked += report.checked;
            if report.max_rel_err > worst.0 {
                worst = (report.max_rel_err, name);
            }
            if report.max_rel_err > GRAD_TOL {
                failed.push(format!("{name}#{i} {:.2e} at {:?}", report.max_rel_err, report.worst));
            }
        }
    }
    let summary = format!(
        "{} cases x {INSTANCES} instances, {checked} derivatives, worst relative error {:.2e} ({}), tolerance {GRAD_TOL:.0e}",
        cases.len(),
        worst.0,
        worst.1
    );
    Ok(if failed.is_empty() { Verdict::pass(summary) } else { Verdict::fail(format!("{summary}; failing: {}", failed.join(", "))) })
}

fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.f64() * y.f64()).sum()
}

fn norm<T: Real>(a: &Tensor<T>) -> f64 {
    dot(a, a).sqrt()
}

/// `|<A x, y> - <x, A^T y>| / (|A x| |y|)` for one random conv geometry.
fn adjoint_gap<T: Real>(rng: &mut ChaCha8Rng) -> csmri::Result<f64> {
    let (k, stride, pad) = [(3, 1, 1), (3, 2, 1), (4, 2, 1), (5, 1, 2), (1, 1, 0), (3, 1, 0)][rng.random_range(0..6)];
    let (c, f) = (rng.random_range(1..5), rng.random_range(1..5));
    let h = fitting(rng.random_range(8..20), k, stride, pad);
    let mut t = Tape::<T>::new();
    let mk = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)));
    let x = t.constant(mk(vec![2, c, h, h], rng));
    let w = t.constant(mk(vec![f, c, k, k], rng));
    let ax = t.conv2d(x, w, None, stride, pad)?;
    let y = t.constant(mk(t.shape(ax).to_vec(), rng));
    let aty = t.conv_transpose2d(y, w, None, stride, pad)?;
    if t.shape(aty) != t.shape(x) {
        return Err(csmri::Error::Shape(format!("adjoint shape {:?} vs {:?}", t.shape(aty), t.shape(x))));
    }
    let lhs = dot(t.value(ax), t.value(y));
    let rhs = dot(t.value(x), t.value(aty));
    Ok((lhs - rhs).abs() / (norm(t.value(ax)) * norm(t.value(y))))
}

pub fn ac2() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut roundtrip, mut parseval, mut idem, mut exact, mut adj64, mut adj32) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for i in 0..50 {
        let (h, w) = if i % 2 == 0 { (64, 64) } else { (rng.random_range(5..40), rng.random_range(5..40)) };
        let x = image(h, w, &mut rng);
        let k = fft2_centered(&x);
        roundtrip = roundtrip.max(ifft2_centered(&k).max_abs_diff(&x));
        parseval = parseval.max((k.norm().powi(2) - x.norm().powi(2)).abs() / x.norm().powi(2));

        let s = sample(h, w, &mut rng);
        let once = data_consistency(&x, &s, DcMode::Replace)?;
        idem = idem.max(data_consistency(&once, &s, DcMode::Replace)?.max_abs_diff(&once));
        let replaced = fft2_centered(&data_consistency(&x, &s, DcMode::Replace)?);
        let y = s.measurements();
        for r in 0..h {
            for c in (0..w).filter(|&c| s.mask().contains(r, c)) {
                let (a, b) = (replaced.at(r, c), y.at(r, c));
                exact = exact.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
            }
        }
        adj64 = adj64.max(adjoint_gap::<f64>(&mut rng)?);
        adj32 = adj32.max(adjoint_gap::<f32>(&mut rng)?);
    }
    let pass = roundtrip <= 1e-6 && parseval <= 1e-6 && idem <= 1e-5 && exact <= 1e-5 && adj64 <= 1e-5 && adj32 <= 1e-5;
    let detail = format!(
        "50 instances: FFT round-trip {roundtrip:.1e}, Parseval {parseval:.1e} (<= 1e-6); DC idempotence {idem:.1e}, \
         masked k-space {exact:.1e} (<= 1e-5); conv adjoint f64 {adj64:.1e}, f32 {adj32:.1e} (<= 1e-5)"
    );
    Ok(Verdict::new(pass, detail))
}

fn psnr_oracle(x: &[f64], y: &[f64], peak: f64) -> f64 {
    let mut sse = 0.0;
    for i in (0..x.len()).rev() {
        sse += (x[i] - y[i]).powi(2);
    }
    20.0 * peak.log10() - 10.0 * (sse / x.len() as f64).log10()
}

/// Local statistics with two-pass variances over an explicit 2-D window.
fn local_ssim(x: &[f64], y: &[f64], w: usize, r0: usize, c0: usize, weights: &[Vec<f64>], cfg: &SsimConfig) -> f64 {
    let n = weights.len();
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            mx += weights[i][j] * x[(r0 + i) * w + c0 + j];
            my += weights[i][j] * y[(r0 + i) * w + c0 + j];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (x[(r0 + i) * w + c0 + j] - mx, y[(r0 + i) * w + c0 + j] - my);
            vx += weights[i][j] * a * a;
            vy += weights[i][j] * b * b;
            cxy += weights[i][j] * a * b;
        }
    }
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let (n, step, weights) = match cfg.window {
        SsimWindow::Gaussian { size, sigma } => {
            let c = (size as f64 - 1.0) / 2.0;
            let raw: Vec<Vec<f64>> = (0..size)
                .map(|i| (0..size).map(|j| (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect())
                .collect();
            let total: f64 = raw.iter().flatten().sum();
            (size, 1, raw.into_iter().map(|row| row.into_iter().map(|v| v / total).collect()).collect::<Vec<Vec<f64>>>())
        }
        SsimWindow::Block { size } => (size, size, vec![vec![1.0 / (size * size) as f64; size]; size]),
    };
    let mut vals = Vec::new();
    let mut r0 = 0;
    while r0 + n <= h {
        let mut c0 = 0;
        while c0 + n <= w {
            vals.push(local_ssim(x, y, w, r0, c0, &weights, cfg));
            c0 += step;
        }
        r0 += step;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn dice_oracle(a: &[u8], b: &[u8]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] != 0).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] != 0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn ac8() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut dp, mut dsg, mut dsb, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(11..40), rng.random_range(11..40));
        let peak = rng.random_range(0.5..2.0);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..peak)).collect();
        let level = rng.random_range(0.001..0.5);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-level..level)).collect();
        dp = dp.max((psnr(&x, &y, peak)? - psnr_oracle(&x, &y, peak)).abs());

        let gauss = SsimConfig::default().with_range(peak);
        dsg = dsg.max((ssim(&x, &y, h, w, &gauss)? - ssim_oracle(&x, &y, h, w, &gauss)).abs());
        let block = SsimConfig::block8().with_range(peak);
        dsb = dsb.max((ssim(&x, &y, h, w, &block)? - ssim_oracle(&x, &y, h, w, &block)).abs());

        let (pa, pb) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
        let a: Vec<u8> = (0..h * w).map(|_| rng.random_bool(pa) as u8).collect();
        let b: Vec<u8> = (0..h * w).map(|_| rng.random_bool(pb) as u8).collect();
        dd = dd.max((dice(&a, &b)? - dice_oracle(&a, &b)).abs());
    }
    let empty = vec![0u8; 16];
    dd = dd.max((dice(&empty, &empty)? - dice_oracle(&empty, &empty)).abs());

    // Hand example: per-image Dice {0.6, 0.8} against {0.8, 0.95}.
    let v = sis_from_dice(&[0.6, 0.8], &[0.8, 0.95])?;
    let ratio = 0.7 / 0.875;
    let sis_ok = v == ratio && (v - 0.8).abs() <= f64::EPSILON;
    let pass = dp <= 1e-6 && dsg <= 1e-6 && dsb <= 1e-6 && dd <= 1e-6 && sis_ok;
    let detail = format!(
        "100 instances, max |diff| vs brute force: PSNR {dp:.1e}, SSIM gaussian {dsg:.1e}, SSIM block {dsb:.1e}, Dice {dd:.1e}; \
         SIS example {v:?} (0.7/0.875 evaluates to {ratio:?}; |v - 0.8| = {:.1e})",
        (v - 0.8).abs()
    );
    Ok(Verdict::new(pass, detail))
}

pub fn ac9() -> Result<Verdict> {
    let cfg = TrainConfig::new(Stage::Refine, Preset::Desk);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut buf = ReplayBuffer::<f32>::new(cfg.replay_capacity, cfg.replay_p)?;
    let batch = 8;
    let fresh = |rng: &mut ChaCha8Rng| Tensor::from_fn([batch, 2, 4, 4], |_| rng.random_range(-1.0f32..1.0));
    let mut sizes_ok = true;
    for k in 1..=20 {
        buf.push_sample(&fresh(&mut rng), &mut rng)?;
        sizes_ok &= buf.len() == (k * batch).min(cfg.replay_capacity);
    }
    let (mut drawn, slots) = (0, 10_000);
    for _ in 0..slots / batch {
        drawn += buf.push_sample(&fresh(&mut rng), &mut rng)?.1;
        sizes_ok &= buf.len() == cfg.replay_capacity;
    }
    let fraction = drawn as f64 / slots as f64;

    let mut t = Tape::<f64>::new();
    let real = t.constant(Tensor::full([4, 1, 8, 8], 0.9));
    let fake = t.constant(Tensor::full([4, 1, 8, 8], 0.0));
    let loss = discriminator_loss(&mut t, real, fake, cfg.smoothing)?;
    let value = t.item(loss);
    let pass = sizes_ok && buf.len() == 80 && (fraction - 0.5).abs() <= 0.05 && (value - 0.3251).abs() <= 1e-4;
    Ok(Verdict::new(
        pass,
        format!(
            "buffer size {} (capacity {}, never exceeded: {sizes_ok}); drawn {drawn}/{slots} = {fraction:.4}; \
             real-target loss at D(x)=0.9 with smoothing {} and D(fake)=0 = {value:.6}",
            buf.len(),
            cfg.replay_capacity,
            cfg.smoothing
        ),
    ))
}
