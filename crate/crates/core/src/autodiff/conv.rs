//! Convolutions over channels-last `[B, H, W, C]` feature maps.
//!
//! Kernel layouts:
//! - pointwise 1x1: `[C_in, C_out]`
//! - depthwise 3x3: `[3, 3, C]`
//! - plain 3x3, strided 2x2, transposed 2x2: `[kh, kw, C_in, C_out]`
//!
//! Plain 3x3 runs as im2col + GEMM. Strided and transposed 2x2 windows do
//! not overlap, so they reduce to space-to-depth / depth-to-space
//! permutations around a GEMM and inherit their backward passes.

use super::{Contributions, NodeId, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Pointwise1x1,
    Depthwise3x3,
    Strided2x2,
    Transposed2x2,
    Plain3x3,
}

impl ConvKind {
    /// Kernel shape for the given channel counts.
    pub fn kernel_shape(self, c_in: usize, c_out: usize) -> Vec<usize> {
        match self {
            ConvKind::Pointwise1x1 => vec![c_in, c_out],
            ConvKind::Depthwise3x3 => vec![3, 3, c_in],
            ConvKind::Strided2x2 | ConvKind::Transposed2x2 => vec![2, 2, c_in, c_out],
            ConvKind::Plain3x3 => vec![3, 3, c_in, c_out],
        }
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, h, w, c] => Ok([b, h, w, c]),
        s => Err(Error::InvalidArgument(format!("conv2d expects [B, H, W, C], got {s:?}"))),
    }
}

fn im2col3x3<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, h, w, c] = dims4(x.shape()).unwrap();
    let xd = x.data();
    let mut col = vec![T::zero(); b * h * w * 9 * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = ((bi * h + i) * w + j) * 9 * c;
                for ky in 0..3 {
                    let y = i + ky;
                    if y < 1 || y > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx < 1 || xx > w {
                            continue;
                        }
                        let src = ((bi * h + y - 1) * w + xx - 1) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        col[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new([b * h * w, 9 * c], col).unwrap()
}

pub(super) fn col2im3x3<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let [b, h, w, c] = dims4(x_shape).unwrap();
    let gd = g.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = ((bi * h + i) * w + j) * 9 * c;
                for ky in 0..3 {
                    let y = i + ky;
                    if y < 1 || y > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx < 1 || xx > w {
                            continue;
                        }
                        let dst = ((bi * h + y - 1) * w + xx - 1) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += gd[src + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [b, h, wd, c] = dims4(x.shape()).unwrap();
    let (xd, kd, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = ((bi * h + i) * wd + j) * c;
                out[o..o + c].copy_from_slice(bd);
                for ky in 0..3 {
                    let y = i + ky;
                    if y < 1 || y > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx < 1 || xx > wd {
                            continue;
                        }
                        let s = ((bi * h + y - 1) * wd + xx - 1) * c;
                        let k = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += kd[k + ch] * xd[s + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(super) fn depthwise_backward<T: Real>(
    ix: NodeId,
    iw: NodeId,
    ib: NodeId,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    needs: &dyn Fn(NodeId) -> bool,
) -> Contributions<T> {
    let [b, h, wd, c] = dims4(x.shape()).unwrap();
    let (xd, kd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); 9 * c];
    let mut db = vec![T::zero(); c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = ((bi * h + i) * wd + j) * c;
                for ch in 0..c {
                    db[ch] += gd[o + ch];
                }
                for ky in 0..3 {
                    let y = i + ky;
                    if y < 1 || y > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx < 1 || xx > wd {
                            continue;
                        }
                        let s = ((bi * h + y - 1) * wd + xx - 1) * c;
                        let k = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dx[s + ch] += kd[k + ch] * gd[o + ch];
                            dw[k + ch] += xd[s + ch] * gd[o + ch];
                        }
                    }
                }
            }
        }
    }
    let mut res = Vec::new();
    if needs(ix) {
        res.push((ix, Tensor::new(x.shape().to_vec(), dx).unwrap()));
    }
    if needs(iw) {
        res.push((iw, Tensor::new(w.shape().to_vec(), dw).unwrap()));
    }
    if needs(ib) {
        res.push((ib, Tensor::new([c], db).unwrap()));
    }
    res
}

fn causal_conv1d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[0];
    let (xd, kd, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..l {
            let o = (bi * l + t) * d;
            out[o..o + d].copy_from_slice(bd);
            for tap in 0..k {
                // tap k-1 sees the current step
                let Some(src_t) = (t + tap + 1).checked_sub(k) else { continue };
                let s = (bi * l + src_t) * d;
                for ch in 0..d {
                    out[o + ch] += kd[tap * d + ch] * xd[s + ch];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(super) fn causal_conv1d_backward<T: Real>(
    ix: NodeId,
    iw: NodeId,
    ib: NodeId,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    needs: &dyn Fn(NodeId) -> bool,
) -> Contributions<T> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[0];
    let (xd, kd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); k * d];
    let mut db = vec![T::zero(); d];
    for bi in 0..b {
        for t in 0..l {
            let o = (bi * l + t) * d;
            for ch in 0..d {
                db[ch] += gd[o + ch];
            }
            for tap in 0..k {
                let Some(src_t) = (t + tap + 1).checked_sub(k) else { continue };
                let s = (bi * l + src_t) * d;
                for ch in 0..d {
                    dx[s + ch] += kd[tap * d + ch] * gd[o + ch];
                    dw[tap * d + ch] += xd[s + ch] * gd[o + ch];
                }
            }
        }
    }
    let mut res = Vec::new();
    if needs(ix) {
        res.push((ix, Tensor::new(x.shape().to_vec(), dx).unwrap()));
    }
    if needs(iw) {
        res.push((iw, Tensor::new(w.shape().to_vec(), dw).unwrap()));
    }
    if needs(ib) {
        res.push((ib, Tensor::new([d], db).unwrap()));
    }
    res
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D convolution of a `[B, H, W, C_in]` map. 3x3 kinds pad by one.
    pub fn conv2d(&self, w: Var<'t, T>, bias: Var<'t, T>, kind: ConvKind) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        self.same_tape(&bias);
        let [b, h, wd, c_in] = dims4(&self.shape())?;
        let ws = w.shape();
        let c_out = match (kind, ws.as_slice()) {
            (ConvKind::Pointwise1x1, &[ci, co]) if ci == c_in => co,
            (ConvKind::Depthwise3x3, &[3, 3, ci]) if ci == c_in => ci,
            (ConvKind::Strided2x2 | ConvKind::Transposed2x2, &[2, 2, ci, co]) if ci == c_in => co,
            (ConvKind::Plain3x3, &[3, 3, ci, co]) if ci == c_in => co,
            _ => {
                return Err(Error::ShapeMismatch {
                    lhs: self.shape(),
                    rhs: ws,
                    context: "conv2d: kernel does not match input channels",
                })
            }
        };
        if bias.shape() != [c_out] {
            return Err(Error::shape(&[c_out], &bias.shape(), "conv2d bias"));
        }
        if matches!(kind, ConvKind::Strided2x2 | ConvKind::Transposed2x2) && (h % 2 != 0 || wd % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} needs even spatial extents, got {h}x{wd}"
            )));
        }
        match kind {
            ConvKind::Pointwise1x1 => self.linear(w, bias),
            ConvKind::Depthwise3x3 => {
                let out = depthwise_forward(&self.value(), &w.value(), &bias.value());
                Ok(self.tape.push(
                    out,
                    Op::Depthwise3x3 {
                        x: self.id,
                        w: w.id,
                        b: bias.id,
                    },
                ))
            }
            ConvKind::Plain3x3 => {
                let col = im2col3x3(&self.value());
                let col = self.tape.push(col, Op::Im2col3x3(self.id));
                col.matmul(w.reshape(vec![9 * c_in, c_out])?)?
                    .reshape(vec![b, h, wd, c_out])?
                    .add(bias)
            }
            ConvKind::Strided2x2 => {
                let (h2, w2) = (h / 2, wd / 2);
                self.reshape(vec![b, h2, 2, w2, 2, c_in])?
                    .permute(&[0, 1, 3, 2, 4, 5])?
                    .reshape(vec![b * h2 * w2, 4 * c_in])?
                    .matmul(w.reshape(vec![4 * c_in, c_out])?)?
                    .reshape(vec![b, h2, w2, c_out])?
                    .add(bias)
            }
            ConvKind::Transposed2x2 => {
                let wk = w.permute(&[2, 0, 1, 3])?.reshape(vec![c_in, 4 * c_out])?;
                self.reshape(vec![b * h * wd, c_in])?
                    .matmul(wk)?
                    .reshape(vec![b, h, wd, 2, 2, c_out])?
                    .permute(&[0, 1, 3, 2, 4, 5])?
                    .reshape(vec![b, 2 * h, 2 * wd, c_out])?
                    .add(bias)
            }
        }
    }

    /// Depthwise causal convolution along the sequence axis of `[B, L, D]`
    /// with kernel `[K, D]`: output step `t` sees inputs `t-K+1 ..= t`.
    pub fn causal_conv1d(&self, w: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[2] || bias.shape() != [xs[2]] {
            return Err(Error::shape(&xs, &ws, "causal_conv1d"));
        }
        let out = causal_conv1d_forward(&self.value(), &w.value(), &bias.value());
        Ok(self.tape.push(
            out,
            Op::CausalConv1d {
                x: self.id,
                w: w.id,
                b: bias.id,
            },
        ))
    }
}
