//! 2-D discrete Fourier transform: iterative radix-2 when the extent is a
//! power of two, direct O(n^2) summation otherwise. Forward transform is
//! unnormalized, `F[k] = sum_x x[n] e^{-2 pi i k n / N}`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Real and imaginary planes of a 2-D spectrum, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid<T> {
    pub height: usize,
    pub width: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Real> ComplexGrid<T> {
    pub fn at(&self, ky: usize, kx: usize) -> (T, T) {
        let i = ky * self.width + kx;
        (self.re[i], self.im[i])
    }

    /// Largest `|F[k] - conj(F[-k])|` component; zero for real inputs.
    pub fn hermitian_defect(&self) -> T {
        let (h, w) = (self.height, self.width);
        let mut worst = T::zero();
        for ky in 0..h {
            for kx in 0..w {
                let (re, im) = self.at(ky, kx);
                let (cr, ci) = self.at((h - ky) % h, (w - kx) % w);
                worst = worst.max((re - cr).abs()).max((im + ci).abs());
            }
        }
        worst
    }
}

/// In-place 1-D transform; `inverse` flips the twiddle sign, no scaling.
pub fn fft1d<T: Real>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    assert_eq!(n, im.len());
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if n.is_power_of_two() {
        radix2(re, im, sign);
    } else {
        direct(re, im, sign);
    }
}

fn radix2<T: Real>(re: &mut [T], im: &mut [T], sign: f64) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let tw: Vec<(T, T)> = (0..half)
            .map(|k| {
                let a = ang * k as f64;
                (T::lit(a.cos()), T::lit(a.sin()))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in tw.iter().enumerate() {
                let (p, q) = (start + k, start + k + half);
                let tr = re[q] * wr - im[q] * wi;
                let ti = re[q] * wi + im[q] * wr;
                re[q] = re[p] - tr;
                im[q] = im[p] - ti;
                re[p] += tr;
                im[p] += ti;
            }
        }
        len *= 2;
    }
}

fn direct<T: Real>(re: &mut [T], im: &mut [T], sign: f64) {
    let n = re.len();
    let (src_re, src_im) = (re.to_vec(), im.to_vec());
    for k in 0..n {
        let mut sr = T::zero();
        let mut si = T::zero();
        for j in 0..n {
            let a = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            let (c, s) = (T::lit(a.cos()), T::lit(a.sin()));
            sr += src_re[j] * c - src_im[j] * s;
            si += src_re[j] * s + src_im[j] * c;
        }
        re[k] = sr;
        im[k] = si;
    }
}

/// Transforms a complex `[h, w]` plane in place (rows, then columns).
pub fn fft2_inplace<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft1d(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft1d(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

/// Forward DFT of a real `[H, W]` image.
pub fn dft2<T: Real>(x: &Tensor<T>) -> Result<ComplexGrid<T>> {
    let &[h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("dft2 expects [H, W], got {:?}", x.shape())));
    };
    let mut re = x.data().to_vec();
    let mut im = vec![T::zero(); re.len()];
    fft2_inplace(&mut re, &mut im, h, w, false);
    Ok(ComplexGrid {
        height: h,
        width: w,
        re,
        im,
    })
}

/// Inverse of [`dft2`] (includes the `1 / (H W)` factor); returns the real part.
pub fn idft2_real<T: Real>(grid: &ComplexGrid<T>) -> Tensor<T> {
    let (h, w) = (grid.height, grid.width);
    let mut re = grid.re.clone();
    let mut im = grid.im.clone();
    fft2_inplace(&mut re, &mut im, h, w, true);
    let scale = T::one() / T::lit((h * w) as f64);
    Tensor::new([h, w], re.into_iter().map(|v| v * scale).collect()).unwrap()
}
