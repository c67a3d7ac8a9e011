//! Evaluation metrics on images with values in `[0, 1]`.
//!
//! Both metrics accept `[H, W, C]` or `[B, H, W, C]` tensors and reduce
//! over every element (PSNR) or every window position, channel and batch
//! item (SSIM).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b, "metric operands"));
    }
    if !(a.len() == 3 || a.len() == 4) {
        return Err(Error::InvalidArgument(format!("metrics expect [H, W, C] or [B, H, W, C], got {a:?}")));
    }
    Ok(())
}

/// `(batch, height, width, channels)` of a 3-D or 4-D image tensor.
fn dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    match *shape {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => unreachable!("checked by check_pair"),
    }
}

/// `10 log10(1 / MSE)` in dB with peak 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a.shape(), b.shape())?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - mid;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of an `[h, w]` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, evaluated only where the
/// window fits entirely inside the image.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a.shape(), b.shape())?;
    let (batch, h, w, c) = dims(a.shape());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let extract = |t: &Tensor<T>, bi: usize, ch: usize| -> Vec<f64> {
        (0..h * w).map(|p| t.data()[(bi * h * w + p) * c + ch].as_f64()).collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        for ch in 0..c {
            let (pa, pb) = (extract(a, bi, ch), extract(b, bi, ch));
            let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, h, w, &taps);
            let mu_b = filter_valid(&pb, h, w, &taps);
            let aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
            let bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
            let ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let var_a = aa[i] - ma * ma;
                let var_b = bb[i] - mb * mb;
                let cov = ab[i] - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
            count += mu_a.len();
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct 2-D window sums with centered moments.
    #[allow(clippy::needless_range_loop)]
    fn ssim_brute(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let k = SSIM_WINDOW;
        let mut win = vec![vec![0.0; k]; k];
        let mut norm = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
                norm += *v;
            }
        }
        let at = |t: &Tensor<f64>, y: usize, x: usize, ch: usize| t.data()[(y * w + x) * c + ch];
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let g = win[i][j] / norm;
                            ma += g * at(a, y0 + i, x0 + j, ch);
                            mb += g * at(b, y0 + i, x0 + j, ch);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let g = win[i][j] / norm;
                            let (da, db) = (at(a, y0 + i, x0 + j, ch) - ma, at(b, y0 + i, x0 + j, ch) - mb);
                            va += g * da * da;
                            vb += g * db * db;
                            cov += g * da * db;
                        }
                    }
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_of_constant_offset_is_twenty_db() {
        let a = Tensor::<f64>::zeros([8, 8, 3]);
        let b = Tensor::<f64>::full([8, 8, 3], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let (a32, b32) = (a.cast::<f32>(), b.cast::<f32>());
        assert!((psnr(&a32, &b32).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = random(&[5, 7, 3], 1);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let (a, b) = (random(&[2, 6, 9, 3], 2), random(&[2, 6, 9, 3], 3));
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a.data()[i] - b.data()[i]).powi(2);
        }
        mse /= a.len() as f64;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = random(&[16, 13, 3], 4);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_reduces_to_luminance_term() {
        let (va, vb) = (0.2, 0.7);
        let a = Tensor::<f64>::full([12, 12, 1], va);
        let b = Tensor::<f64>::full([12, 12, 1], vb);
        let c1 = 1e-4;
        let expected = (2.0 * va * vb + c1) / (va * va + vb * vb + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force_windows() {
        let a = random(&[17, 14, 2], 5);
        let b = a.map(|v| (v + 0.3 * (v * 7.0).sin()).clamp(0.0, 1.0));
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_brute(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        let (r1, r2) = (random(&[12, 15, 3], 6), random(&[12, 15, 3], 7));
        assert!((ssim(&r1, &r2).unwrap() - ssim_brute(&r1, &r2)).abs() < 1e-6);
    }

    #[test]
    fn ssim_averages_batch_items() {
        let (a, b) = (random(&[2, 12, 12, 1], 8), random(&[2, 12, 12, 1], 9));
        let item = |t: &Tensor<f64>, i: usize| Tensor::new([12, 12, 1], t.data()[i * 144..(i + 1) * 144].to_vec()).unwrap();
        let each = (ssim(&item(&a, 0), &item(&b, 0)).unwrap() + ssim(&item(&a, 1), &item(&b, 1)).unwrap()) / 2.0;
        assert!((ssim(&a, &b).unwrap() - each).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let x = Tensor::<f64>::zeros([10, 32, 3]);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn metrics_reject_shape_mismatch() {
        let a = Tensor::<f64>::zeros([12, 12, 3]);
        let b = Tensor::<f64>::zeros([12, 12, 1]);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..500) {
            let (a, b) = (random(&[11, 12, 2], seed), random(&[11, 12, 2], seed + 1000));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
