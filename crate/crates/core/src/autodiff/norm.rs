use super::{Contributions, NodeId, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<T: Real>(
    ix: NodeId,
    igamma: NodeId,
    ibeta: NodeId,
    gamma: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    g: &Tensor<T>,
    needs: &dyn Fn(NodeId) -> bool,
) -> Contributions<T> {
    let c = gamma.len();
    let rows = xhat.len() / c;
    let (gd, gm) = (g.data(), gamma.data());
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let inv_c = T::one() / T::lit(c as f64);
    for r in 0..rows {
        let xs = &xhat[r * c..(r + 1) * c];
        let gs = &gd[r * c..(r + 1) * c];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for k in 0..c {
            let dxh = gs[k] * gm[k];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xs[k];
            dgamma[k] += gs[k] * xs[k];
            dbeta[k] += gs[k];
        }
        mean_dxhat *= inv_c;
        mean_dxhat_xhat *= inv_c;
        for k in 0..c {
            let dxh = gs[k] * gm[k];
            dx[r * c + k] = rstd[r] * (dxh - mean_dxhat - xs[k] * mean_dxhat_xhat);
        }
    }
    let mut res = Vec::new();
    if needs(ix) {
        res.push((ix, Tensor::new(g.shape().to_vec(), dx).unwrap()));
    }
    if needs(igamma) {
        res.push((igamma, Tensor::new([c], dgamma).unwrap()));
    }
    if needs(ibeta) {
        res.push((ibeta, Tensor::new([c], dbeta).unwrap()));
    }
    res
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(x.shape(), &gamma.shape(), "layer_norm affine params"));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let rows = x.len() / c.max(1);
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xs = &x.data()[r * c..(r + 1) * c];
            let mean = xs.iter().copied().sum::<T>() * inv_c;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let xh = (xs[k] - mean) * rs;
                xhat[r * c + k] = xh;
                out[r * c + k] = xh * gv.data()[k] + bv.data()[k];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }
}
