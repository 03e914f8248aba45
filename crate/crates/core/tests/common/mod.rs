//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use latent_audit::model::{build_model, AutoencoderConfig};
use latent_audit::pca::LatentMatrix;
use latent_audit::tensor::{
    bilinear_resize, bilinear_resize_backward, bilinear_upsample, bilinear_upsample_backward, conv2d_backward,
    conv2d_forward, mse_loss, mse_loss_grad, relu, relu_backward, sigmoid, sigmoid_backward, ConvSpec, PaddingMode,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor, so gradients that are both ~0 compare absolutely.
const REL_FLOOR: f64 = 1e-6;
pub const SHAPES_PER_OP: usize = 20;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to `x[i]`.
fn central(x: &mut [f64], i: usize, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let plus = f(x);
    x[i] = orig - FD_STEP;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

/// Largest relative error of `analytic` against central differences of `f`.
pub fn check(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| rel_err(analytic[i], central(&mut x, i, &mut f)))
        .fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(t: &Tensor<f64>, r: &[f64]) -> f64 {
    t.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone)]
pub struct OpResult {
    pub op: &'static str,
    pub shapes: Vec<String>,
    pub max_rel_err: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.shapes.len() >= SHAPES_PER_OP && self.max_rel_err < FD_TOLERANCE
    }
}

fn run_op(op: &'static str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (String, f64)) -> OpResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..SHAPES_PER_OP {
        let (shape, err) = case(&mut rng);
        shapes.push(shape);
        worst = worst.max(err);
    }
    OpResult {
        op,
        shapes,
        max_rel_err: worst,
    }
}

pub fn conv2d(seed: u64) -> OpResult {
    run_op("conv2d", seed, |rng| {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let (c_in, c_out) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(k.max(3)..=8), rng.random_range(k.max(3)..=8));
        let mode = if rng.random_bool(0.5) { PaddingMode::Zero } else { PaddingMode::Reflect };
        let spec = ConvSpec {
            padding_mode: mode,
            ..ConvSpec::strided(k, stride)
        };
        let x = uniform(rng, c_in * h * w, -1.0, 1.0);
        let wt = uniform(rng, c_out * c_in * k * k, -1.0, 1.0);
        let b = uniform(rng, c_out, -0.5, 0.5);
        let out = conv2d_forward(&tensor(&[c_in, h, w], x.clone()), &tensor(&[c_out, c_in, k, k], wt.clone()), &b, &spec).unwrap();
        let r = uniform(rng, out.len(), -1.0, 1.0);
        let g = conv2d_backward(&tensor(out.shape(), r.clone()), &tensor(&[c_in, h, w], x.clone()), &tensor(&[c_out, c_in, k, k], wt.clone()), &spec).unwrap();
        let eval = |x: &[f64], wt: &[f64], b: &[f64]| {
            let out = conv2d_forward(&tensor(&[c_in, h, w], x.to_vec()), &tensor(&[c_out, c_in, k, k], wt.to_vec()), b, &spec).unwrap();
            weighted_sum(&out, &r)
        };
        let e_in = check(&x, g.input.data(), |v| eval(v, &wt, &b));
        let e_w = check(&wt, g.weights.data(), |v| eval(&x, v, &b));
        let e_b = check(&b, &g.bias, |v| eval(&x, &wt, v));
        (
            format!("in {c_in}x{h}x{w} out {c_out} k{k} s{stride} {mode:?}"),
            e_in.max(e_w).max(e_b),
        )
    })
}

fn shape3(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.random_range(1..=3), rng.random_range(1..=7), rng.random_range(1..=7)]
}

pub fn relu_op(seed: u64) -> OpResult {
    run_op("relu", seed, |rng| {
        let s = shape3(rng);
        let n = s.iter().product();
        // Kept clear of the kink at 0.
        let x: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let r = uniform(rng, n, -1.0, 1.0);
        let g = relu_backward(&tensor(&s, r.clone()), &tensor(&s, x.clone())).unwrap();
        let err = check(&x, g.data(), |v| weighted_sum(&relu(&tensor(&s, v.to_vec())), &r));
        (format!("{s:?}"), err)
    })
}

pub fn sigmoid_op(seed: u64) -> OpResult {
    run_op("sigmoid", seed, |rng| {
        let s = shape3(rng);
        let n = s.iter().product();
        let x = uniform(rng, n, -4.0, 4.0);
        let r = uniform(rng, n, -1.0, 1.0);
        let y = sigmoid(&tensor(&s, x.clone()));
        let g = sigmoid_backward(&tensor(&s, r.clone()), &y).unwrap();
        let err = check(&x, g.data(), |v| weighted_sum(&sigmoid(&tensor(&s, v.to_vec())), &r));
        (format!("{s:?}"), err)
    })
}

pub fn resize_op(seed: u64) -> OpResult {
    run_op("bilinear_resize", seed, |rng| {
        let s = shape3(rng);
        let (oh, ow) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let x = uniform(rng, s.iter().product(), -1.0, 1.0);
        let r = uniform(rng, s[0] * oh * ow, -1.0, 1.0);
        let g = bilinear_resize_backward(&tensor(&[s[0], oh, ow], r.clone()), s[1], s[2]).unwrap();
        let err = check(&x, g.data(), |v| weighted_sum(&bilinear_resize(&tensor(&s, v.to_vec()), oh, ow).unwrap(), &r));
        (format!("{s:?} -> {oh}x{ow}"), err)
    })
}

pub fn upsample_op(seed: u64) -> OpResult {
    run_op("bilinear_upsample", seed, |rng| {
        let s = shape3(rng);
        let f = rng.random_range(2..=3);
        let x = uniform(rng, s.iter().product(), -1.0, 1.0);
        let r = uniform(rng, s[0] * s[1] * f * s[2] * f, -1.0, 1.0);
        let g = bilinear_upsample_backward(&tensor(&[s[0], s[1] * f, s[2] * f], r.clone()), f).unwrap();
        let err = check(&x, g.data(), |v| weighted_sum(&bilinear_upsample(&tensor(&s, v.to_vec()), f).unwrap(), &r));
        (format!("{s:?} x{f}"), err)
    })
}

pub fn mse_op(seed: u64) -> OpResult {
    run_op("mse_loss", seed, |rng| {
        let s = shape3(rng);
        let n = s.iter().product();
        let p = uniform(rng, n, 0.0, 1.0);
        let t = tensor(&s, uniform(rng, n, 0.0, 1.0));
        let g = mse_loss_grad(&tensor(&s, p.clone()), &t).unwrap();
        let err = check(&p, g.data(), |v| mse_loss(&tensor(&s, v.to_vec()), &t).unwrap());
        (format!("{s:?}"), err)
    })
}

/// Parameter gradients of the full reconstruction loss, on sampled coordinates.
pub fn autoencoder(seed: u64) -> OpResult {
    run_op("autoencoder", seed, |rng| {
        let depth = rng.random_range(1..=2);
        let unit = 1 << depth;
        let c = rng.random_range(1..=2);
        let (h, w) = (unit * rng.random_range(2..=4), unit * rng.random_range(2..=4));
        let mut cfg = AutoencoderConfig::new((c, h, w), depth, rng.random_range(2..=3));
        cfg.residual_blocks_per_stage = rng.random_range(0..=2);
        let mut model = build_model::<f64>(&cfg, rng.random()).unwrap();
        // Zero-initialized biases put dead channels exactly on the ReLU kink.
        for t in model.parameters_mut().into_iter().skip(1).step_by(2) {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let img = tensor(&[c, h, w], uniform(rng, c * h * w, 0.0, 1.0));
        let (_, grads) = model.loss_and_grads(&img).unwrap();
        let analytic: Vec<Vec<f64>> = grads.parameters().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..24 {
            let p = rng.random_range(0..analytic.len());
            let j = rng.random_range(0..analytic[p].len());
            let orig = model.parameters_mut()[p].data()[j];
            let loss_at = |v: f64, model: &mut latent_audit::model::AutoencoderModel<f64>| {
                model.parameters_mut()[p].data_mut()[j] = v;
                model.loss_and_grads(&img).unwrap().0
            };
            let plus = loss_at(orig + FD_STEP, &mut model);
            let minus = loss_at(orig - FD_STEP, &mut model);
            model.parameters_mut()[p].data_mut()[j] = orig;
            let e = rel_err(analytic[p][j], (plus - minus) / (2.0 * FD_STEP));
            worst = worst.max(e);
        }
        (
            format!("{c}x{h}x{w} depth {depth} base {} blocks {}", cfg.base_channels, cfg.residual_blocks_per_stage),
            worst,
        )
    })
}

pub fn gradient_suite(seed: u64) -> Vec<OpResult> {
    vec![
        conv2d(seed),
        relu_op(seed + 1),
        sigmoid_op(seed + 2),
        resize_op(seed + 3),
        upsample_op(seed + 4),
        mse_op(seed + 5),
        autoencoder(seed + 6),
    ]
}

pub fn random_latents(n: usize, d: usize, rng: &mut ChaCha8Rng) -> LatentMatrix {
    let ids = (0..n).map(|i| format!("s{i:03}")).collect();
    // Per-column scales keep the spectrum spread out.
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
    let values = (0..n * d).map(|x| rng.random_range(-1.0..1.0) * scales[x % d]).collect();
    LatentMatrix::new(ids, d, values).unwrap()
}

/// Sample covariance eigenpairs by cyclic Jacobi rotation, largest first.
pub fn covariance_eigen(m: &LatentMatrix) -> Vec<(f64, Vec<f64>)> {
    let (n, d) = (m.rows(), m.dim);
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| m.row(i)[j]).sum::<f64>() / n as f64).collect();
    let mut a = vec![vec![0.0; d]; d];
    for (p, row) in a.iter_mut().enumerate() {
        for (q, cell) in row.iter_mut().enumerate() {
            *cell = (0..n).map(|i| (m.row(i)[p] - mean[p]) * (m.row(i)[q] - mean[q])).sum::<f64>() / (n - 1) as f64;
        }
    }
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..d {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d).map(|j| (a[j][j], (0..d).map(|i| v[i][j]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleGap {
    pub variance_err: f64,
    /// Smallest `|dot|` between matched components.
    pub min_abs_dot: f64,
    pub orthonormality_err: f64,
    pub descending: bool,
}

/// Compares an SVD-route fit of `m` against the covariance oracle.
pub fn pca_vs_oracle(m: &LatentMatrix) -> OracleGap {
    use latent_audit::pca::{fit_pca_with, PcaMethod};
    let k = (m.rows() - 1).min(m.dim);
    let fit = fit_pca_with(m, k, PcaMethod::Svd).unwrap();
    let oracle = covariance_eigen(m);
    let mut gap = OracleGap {
        min_abs_dot: 1.0,
        orthonormality_err: fit.orthonormality_error(),
        descending: fit.explained_variance.windows(2).all(|w| w[0] >= w[1]),
        ..Default::default()
    };
    for i in 0..k {
        gap.variance_err = gap.variance_err.max((fit.explained_variance[i] - oracle[i].0).abs());
        let dot: f64 = fit.component(i).iter().zip(&oracle[i].1).map(|(a, b)| a * b).sum();
        gap.min_abs_dot = gap.min_abs_dot.min(dot.abs());
    }
    gap
}
