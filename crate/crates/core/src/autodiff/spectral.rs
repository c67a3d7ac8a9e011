use super::{Op, Var};
use crate::error::{Error, Result};
use crate::fft::fft2_inplace;
use crate::real::Real;
use crate::tensor::Tensor;

/// `(plane offset, flat index)` pairs of one `(batch, channel)` plane in a
/// `[B, H, W, C]` layout.
fn plane(shape: &[usize], bi: usize, ch: usize) -> impl Iterator<Item = (usize, usize)> {
    let (hw, c) = (shape[1] * shape[2], shape[3]);
    (0..hw).map(move |p| (p, (bi * hw + p) * c + ch))
}

fn forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = vec![T::zero(); x.len() * 2];
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for bi in 0..s[0] {
        for ch in 0..s[3] {
            for (p, i) in plane(s, bi, ch) {
                re[p] = x.data()[i];
                im[p] = T::zero();
            }
            fft2_inplace(&mut re, &mut im, h, w, false);
            for (p, i) in plane(s, bi, ch) {
                out[2 * i] = re[p];
                out[2 * i + 1] = im[p];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.push(2);
    Tensor::new(shape, out).unwrap()
}

/// Adjoint of the real-to-complex DFT: `Re(F(g_re - i g_im))` per plane.
pub(super) fn dft2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = &g.shape()[..4];
    let (h, w) = (s[1], s[2]);
    let mut dx = vec![T::zero(); g.len() / 2];
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for bi in 0..s[0] {
        for ch in 0..s[3] {
            for (p, i) in plane(s, bi, ch) {
                re[p] = g.data()[2 * i];
                im[p] = -g.data()[2 * i + 1];
            }
            fft2_inplace(&mut re, &mut im, h, w, false);
            for (p, i) in plane(s, bi, ch) {
                dx[i] = re[p];
            }
        }
    }
    Tensor::new(s.to_vec(), dx).unwrap()
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-plane 2-D DFT of `[B, H, W, C]`; output `[B, H, W, C, 2]` holds
    /// (real, imaginary) in the last axis.
    pub fn dft2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 4 {
            return Err(Error::InvalidArgument(format!("dft2 expects [B, H, W, C], got {:?}", x.shape())));
        }
        Ok(self.tape.push(forward(&x), Op::Dft2(self.id)))
    }
}
