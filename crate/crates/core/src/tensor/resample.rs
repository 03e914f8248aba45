//! Bilinear resampling with half-pixel centers.
//!
//! Output pixel `o` samples source coordinate `(o + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`. Corners are not aligned.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Two-tap interpolation weights for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input_len: usize, output_len: usize) -> Vec<Tap> {
    let scale = input_len as f64 / output_len as f64;
    (0..output_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input_len - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Resamples every channel of a `[C, H, W]` tensor to `out_h x out_w`.
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "cannot resample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in &ty {
            let (wy0, wy1) = (T::from_f64(y.w_lo), T::from_f64(y.w_hi));
            let r0 = &plane[y.lo * w..(y.lo + 1) * w];
            let r1 = &plane[y.hi * w..(y.hi + 1) * w];
            for x in &tx {
                let (wx0, wx1) = (T::from_f64(x.w_lo), T::from_f64(x.w_hi));
                let top = wx0 * r0[x.lo] + wx1 * r0[x.hi];
                let bottom = wx0 * r1[x.lo] + wx1 * r1[x.hi];
                out.push(wy0 * top + wy1 * bottom);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)?.check_finite("bilinear_resize")
}

/// Adjoint of [`bilinear_resize`]: scatters `grad_out` back onto the `in_h x in_w` grid.
pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad_out.chw()?;
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "cannot take resample adjoint from {out_h}x{out_w} to {in_h}x{in_w}"
        )));
    }
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let go = grad_out.data();
    let mut grad = vec![T::zero(); c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut grad[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        let gplane = &go[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(y.w_lo), T::from_f64(y.w_hi));
            for (ox, x) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                let (wx0, wx1) = (T::from_f64(x.w_lo), T::from_f64(x.w_hi));
                plane[y.lo * in_w + x.lo] += wy0 * wx0 * g;
                plane[y.lo * in_w + x.hi] += wy0 * wx1 * g;
                plane[y.hi * in_w + x.lo] += wy1 * wx0 * g;
                plane[y.hi * in_w + x.hi] += wy1 * wx1 * g;
            }
        }
    }
    Tensor::new([c, in_h, in_w], grad)?.check_finite("bilinear_resize_backward")
}

/// Integer-factor upsampling, `[C, H, W] -> [C, fH, fW]`.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(Error::Config(format!("upsample factor must be >= 2, got {factor}")));
    }
    let (_, h, w) = input.chw()?;
    bilinear_resize(input, h * factor, w * factor)
}

pub fn bilinear_upsample_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(Error::Config(format!("upsample factor must be >= 2, got {factor}")));
    }
    let (_, h, w) = grad_out.chw()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "grad_out {h}x{w} is not a multiple of upsample factor {factor}"
        )));
    }
    bilinear_resize_backward(grad_out, h / factor, w / factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel formula written independently of the tap tables.
    fn pixel(src: &[[f64; 2]; 2], oy: usize, ox: usize, factor: usize) -> f64 {
        let coord = |o: usize| ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, 1.0);
        let (sy, sx) = (coord(oy), coord(ox));
        let top = src[0][0] * (1.0 - sx) + src[0][1] * sx;
        let bottom = src[1][0] * (1.0 - sx) + src[1][1] * sx;
        top * (1.0 - sy) + bottom * sy
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full([2, 3, 5], 0.7);
        let y = bilinear_upsample(&x, 3).unwrap();
        assert_eq!(y.shape(), &[2, 9, 15]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_broadcasts() {
        let x = Tensor::<f64>::full([1, 1, 1], 4.5);
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.5; 4]);
    }

    #[test]
    fn two_by_two_matches_formula() {
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let x = Tensor::<f64>::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = pixel(&src, oy, ox, 2);
                assert!((y.data()[oy * 4 + ox] - want).abs() < 1e-14);
            }
        }
        // Frozen from the formula above: first row is 0, 0.25, 0.75, 1.
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn factor_below_two_rejected() {
        let x = Tensor::<f64>::zeros([1, 2, 2]);
        assert!(matches!(bilinear_upsample(&x, 1), Err(Error::Config(_))));
        assert!(matches!(bilinear_upsample_backward(&x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c, h, w, f) in [(1, 2, 2, 2), (2, 3, 5, 2), (3, 4, 4, 3), (1, 1, 7, 4)] {
            let x = Tensor::<f64>::from_fn([c, h, w], |_| rng.random_range(-1.0..1.0));
            let y = Tensor::<f64>::from_fn([c, h * f, w * f], |_| rng.random_range(-1.0..1.0));
            let lhs = bilinear_upsample(&x, f).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&bilinear_upsample_backward(&y, f).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn unit_grad_gives_column_sums() {
        let (h, w, f) = (3, 4, 2);
        let ones = Tensor::<f64>::full([1, h * f, w * f], 1.0);
        let grad = bilinear_upsample_backward(&ones, f).unwrap();
        // Column j of the linear map is upsample(e_j); its sum is what pixel j receives.
        for j in 0..h * w {
            let mut basis = Tensor::<f64>::zeros([1, h, w]);
            basis.data_mut()[j] = 1.0;
            let col_sum: f64 = bilinear_upsample(&basis, f).unwrap().data().iter().sum();
            assert!((grad.data()[j] - col_sum).abs() < 1e-12);
        }
        // Total mass is preserved.
        let total: f64 = grad.data().iter().sum();
        assert!((total - (h * f * w * f) as f64).abs() < 1e-9);
    }
}
