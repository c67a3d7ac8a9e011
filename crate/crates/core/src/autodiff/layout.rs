use super::{Contributions, NodeId, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub(super) fn permute_backward<T: Real>(g: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    g.permute(&inverse)
}

pub(super) fn concat_backward<T: Real>(ids: &[NodeId], inputs: &[&Tensor<T>], g: &Tensor<T>) -> Contributions<T> {
    let total = *g.shape().last().unwrap();
    let rows = g.len() / total.max(1);
    let mut offset = 0;
    let mut res = Vec::with_capacity(ids.len());
    for (&id, x) in ids.iter().zip(inputs) {
        let w = *x.shape().last().unwrap();
        let mut d = Vec::with_capacity(x.len());
        for r in 0..rows {
            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
        }
        res.push((id, Tensor::new(x.shape().to_vec(), d).unwrap()));
        offset += w;
    }
    res
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let v = self.value();
        if numel(&shape) != v.len() {
            return Err(Error::ElementCount {
                expected: numel(&shape),
                shape,
                actual: v.len(),
            });
        }
        let out = Tensor::clone(&v).reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        Ok(self.tape.push(out, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &vals[0].shape()[..vals[0].ndim() - 1];
        for v in &vals[1..] {
            if v.ndim() != vals[0].ndim() || &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::shape(vals[0].shape(), v.shape(), "concat leading extents"));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(first.tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    #[test]
    fn raster_flatten_order() {
        // 2x2x1 map [[a, b], [c, d]] flattens to [a, b, c, d]
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_f64([2, 2, 1], &[1., 2., 3., 4.]).unwrap());
        let s = m.reshape(vec![4, 1]).unwrap();
        assert_eq!(s.value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn double_transpose_is_identity() {
        let tape = Tape::<f64>::new();
        let x = Tensor::uniform([3, 4, 5], -1.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(20));
        let v = tape.constant(x.clone());
        let back = v.transpose().unwrap().transpose().unwrap();
        assert_eq!(*back.value(), x);
    }

    #[test]
    fn reshape_element_count_checked() {
        let tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::zeros([2, 3]));
        assert!(v.reshape(vec![4]).is_err());
    }

    #[test]
    fn permute_and_concat_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 2, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([3, 2, 6], -1.0, 1.0, &mut rng);
        let report = check_gradients(&[a, b], 0, |tape, v| {
            let p = v[0].permute(&[1, 0, 2])?;
            let c = Var::concat_last(&[p, v[1]])?;
            Ok(c.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
