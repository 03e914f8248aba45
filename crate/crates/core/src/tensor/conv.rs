use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    /// Mirror about the edge pixel, which is not repeated.
    Reflect,
}

/// Geometry of a square 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PaddingMode,
}

impl ConvSpec {
    /// Stride-1 convolution with `(k - 1) / 2` zero padding, preserving spatial size.
    pub fn padded(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            stride: 1,
            padding: (kernel_size - 1) / 2,
            padding_mode: PaddingMode::Zero,
        }
    }

    /// Padded convolution with a stride; halves each even spatial dimension at stride 2.
    pub fn strided(kernel_size: usize, stride: usize) -> Self {
        Self {
            stride,
            ..Self::padded(kernel_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "kernel_size and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Output extent along one axis, or `None` if the padded input is smaller than the kernel.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let padded = input_len + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }
}

/// Gradients of `sum(grad_out * conv2d_forward(input, weights, bias))`.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (c_in, h, w) = input.chw()?;
    let (c_out, wc_in, kh, kw) = match weights.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Config(format!(
                "conv weights must be [C_out, C_in, k, k], got {:?}",
                weights.shape()
            )))
        }
    };
    if kh != spec.kernel_size || kw != spec.kernel_size {
        return Err(Error::Config(format!(
            "weights have a {kh}x{kw} kernel but spec says {}",
            spec.kernel_size
        )));
    }
    if wc_in != c_in {
        return Err(Error::Config(format!(
            "weights expect {wc_in} input channels, input has {c_in}"
        )));
    }
    if spec.padding_mode == PaddingMode::Reflect && (spec.padding >= h || spec.padding >= w) {
        return Err(Error::Config(format!(
            "reflect padding {} needs an input larger than {h}x{w}",
            spec.padding
        )));
    }
    let (Some(ho), Some(wo)) = (spec.output_len(h), spec.output_len(w)) else {
        return Err(Error::Config(format!(
            "input {h}x{w} with padding {} is smaller than kernel {}",
            spec.padding, spec.kernel_size
        )));
    };
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        k: spec.kernel_size,
        hp: h + 2 * spec.padding,
        wp: w + 2 * spec.padding,
        ho,
        wo,
    })
}

/// Maps a possibly out-of-range index onto `[0, n)` by mirroring.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn pad_input<T: Scalar>(input: &[T], g: &Geometry, spec: &ConvSpec) -> Vec<T> {
    let p = spec.padding;
    if p == 0 {
        return input.to_vec();
    }
    let mut padded = vec![T::zero(); g.c_in * g.hp * g.wp];
    for c in 0..g.c_in {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut padded[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        match spec.padding_mode {
            PaddingMode::Zero => {
                for y in 0..g.h {
                    let row = (y + p) * g.wp + p;
                    dst[row..row + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
                }
            }
            PaddingMode::Reflect => {
                for py in 0..g.hp {
                    let sy = reflect_index(py as isize - p as isize, g.h);
                    for px in 0..g.wp {
                        let sx = reflect_index(px as isize - p as isize, g.w);
                        dst[py * g.wp + px] = src[sy * g.w + sx];
                    }
                }
            }
        }
    }
    padded
}

/// Folds a gradient on the padded grid back onto the unpadded input.
fn unpad_grad<T: Scalar>(padded: &[T], g: &Geometry, spec: &ConvSpec) -> Vec<T> {
    let p = spec.padding;
    if p == 0 {
        return padded.to_vec();
    }
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let src = &padded[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        match spec.padding_mode {
            PaddingMode::Zero => {
                for y in 0..g.h {
                    let row = (y + p) * g.wp + p;
                    dst[y * g.w..(y + 1) * g.w].copy_from_slice(&src[row..row + g.w]);
                }
            }
            PaddingMode::Reflect => {
                for py in 0..g.hp {
                    let sy = reflect_index(py as isize - p as isize, g.h);
                    for px in 0..g.wp {
                        let sx = reflect_index(px as isize - p as isize, g.w);
                        dst[sy * g.w + sx] += src[py * g.wp + px];
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input, weights, spec)?;
    if bias.len() != g.c_out {
        return Err(Error::Config(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            g.c_out
        )));
    }
    let padded = pad_input(input.data(), &g, spec);
    let w = weights.data();
    let s = spec.stride;
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let plane = g.hp * g.wp;
    let mut out = vec![T::zero(); g.c_out * ho * wo];

    for (co, out_c) in out.chunks_exact_mut(ho * wo).enumerate() {
        out_c.fill(bias[co]);
        for ci in 0..g.c_in {
            let src = &padded[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * g.c_in + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let row = &src[(oy * s + ky) * g.wp..(oy * s + ky + 1) * g.wp];
                        let dst = &mut out_c[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            for (o, &x) in dst.iter_mut().zip(&row[kx..kx + wo]) {
                                *o += wv * x;
                            }
                        } else {
                            for (ox, o) in dst.iter_mut().enumerate() {
                                *o += wv * row[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([g.c_out, ho, wo], out)?.check_finite("conv2d_forward")
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let (input_grad, weights, bias) = conv2d_backward_inner(grad_out, input, weights, spec, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("requested input gradient"),
        weights,
        bias,
    })
}

/// Backward pass; skips the input gradient when `need_input` is false.
pub(crate) fn conv2d_backward_inner<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let g = geometry(input, weights, spec)?;
    if grad_out.shape() != [g.c_out, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv2d_backward: grad_out {:?} but forward output is {:?}",
            grad_out.shape(),
            [g.c_out, g.ho, g.wo]
        )));
    }
    let padded = pad_input(input.data(), &g, spec);
    let w = weights.data();
    let go = grad_out.data();
    let s = spec.stride;
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let plane = g.hp * g.wp;

    let mut grad_w = vec![T::zero(); w.len()];
    let mut grad_b = vec![T::zero(); g.c_out];
    let mut grad_padded = if need_input {
        vec![T::zero(); padded.len()]
    } else {
        Vec::new()
    };

    for co in 0..g.c_out {
        let go_c = &go[co * ho * wo..(co + 1) * ho * wo];
        grad_b[co] = go_c.iter().copied().sum();
        for ci in 0..g.c_in {
            let src = &padded[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * g.c_in + ci) * k + ky) * k + kx;
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let row = &src[(oy * s + ky) * g.wp..];
                        let grow = &go_c[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            for (&gv, &x) in grow.iter().zip(&row[kx..kx + wo]) {
                                acc += gv * x;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                acc += gv * row[ox * s + kx];
                            }
                        }
                    }
                    grad_w[widx] = acc;

                    if need_input {
                        let wv = w[widx];
                        let dst = &mut grad_padded[ci * plane..(ci + 1) * plane];
                        for oy in 0..ho {
                            let base = (oy * s + ky) * g.wp + kx;
                            let grow = &go_c[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                for (d, &gv) in dst[base..base + wo].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    dst[base + ox * s] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let grad_input = if need_input {
        let data = unpad_grad(&grad_padded, &g, spec);
        Some(Tensor::new([g.c_in, g.h, g.w], data)?.check_finite("conv2d_backward")?)
    } else {
        None
    };
    let grad_w = Tensor::new(weights.shape().to_vec(), grad_w)?.check_finite("conv2d_backward")?;
    if grad_b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("conv2d_backward produced a non-finite bias gradient".into()));
    }
    Ok((grad_input, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct definition: six nested loops with explicit bounds checks.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &ConvSpec) -> Tensor<f64> {
        let (ci_n, h, wi) = x.chw().unwrap();
        let co_n = w.shape()[0];
        let k = spec.kernel_size;
        let p = spec.padding as isize;
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (wi + 2 * spec.padding - k) / spec.stride + 1;
        let mut out = Tensor::zeros([co_n, ho, wo]);
        for co in 0..co_n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky) as isize - p;
                                let ix = (ox * spec.stride + kx) as isize - p;
                                let (iy, ix) = match spec.padding_mode {
                                    PaddingMode::Zero => {
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                            continue;
                                        }
                                        (iy as usize, ix as usize)
                                    }
                                    PaddingMode::Reflect => {
                                        (reflect_index(iy, h), reflect_index(ix, wi))
                                    }
                                };
                                acc += w.data()[((co * ci_n + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + iy) * wi + ix];
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::full([1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], &ConvSpec::padded(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::<f64>::full([1, 4, 4], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d_forward(&x, &w, &[0.0], &ConvSpec::strided(3, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in [
            ConvSpec::padded(3),
            ConvSpec::strided(3, 2),
            ConvSpec { kernel_size: 3, stride: 1, padding: 0, padding_mode: PaddingMode::Zero },
            ConvSpec { kernel_size: 3, stride: 2, padding: 1, padding_mode: PaddingMode::Reflect },
            ConvSpec { kernel_size: 3, stride: 1, padding: 2, padding_mode: PaddingMode::Reflect },
        ] {
            let x = random(&[2, 5, 5], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let want = conv_oracle(&x, &w, &b, &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels_and_small_input() {
        let x = Tensor::<f64>::zeros([2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, &[0.0], &ConvSpec::padded(3)),
            Err(Error::Config(_))
        ));
        let x = Tensor::<f64>::zeros([1, 2, 2]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let spec = ConvSpec { padding: 0, ..ConvSpec::padded(3) };
        assert!(conv2d_forward(&x, &w, &[0.0], &spec).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 6, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let spec = ConvSpec::strided(3, 2);
        let g = Tensor::zeros([3, 3, 3]);
        let grads = conv2d_backward(&g, &x, &w, &spec).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_product_rule() {
        let x = Tensor::<f64>::full([1, 1, 1], 3.0);
        let w = Tensor::full([1, 1, 1, 1], -2.0);
        let g = Tensor::full([1, 1, 1], 0.5);
        let grads = conv2d_backward(&g, &x, &w, &ConvSpec::padded(1)).unwrap();
        assert_eq!(grads.input.data(), &[0.5 * -2.0]);
        assert_eq!(grads.weights.data(), &[0.5 * 3.0]);
        assert_eq!(grads.bias, vec![0.5]);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::<f64>::zeros([1, 4, 4]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let g = Tensor::zeros([1, 4, 4]);
        assert!(matches!(
            conv2d_backward(&g, &x, &w, &ConvSpec::strided(3, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
    }
}
