use super::{Contributions, NodeId, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(a.shape(), b.shape(), "matmul expects 2-D operands"));
    };
    if k != k2 {
        return Err(Error::shape(a.shape(), b.shape(), "matmul inner dimension"));
    }
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut c, n as isize, 1);
    Tensor::new([m, n], c)
}

pub(super) fn matmul_backward<T: Real>(
    ia: NodeId,
    ib: NodeId,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &dyn Fn(NodeId) -> bool,
) -> Contributions<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut res = Vec::new();
    if needs(ia) {
        // dA = dY @ B^T
        let mut da = vec![T::zero(); m * k];
        T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
        res.push((ia, Tensor::new([m, k], da).unwrap()));
    }
    if needs(ib) {
        // dB = A^T @ dY
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
        res.push((ib, Tensor::new([k, n], db).unwrap()));
    }
    res
}

impl<'t, T: Real> Var<'t, T> {
    /// `[M, K] @ [K, N] -> [M, N]`
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = matmul_forward(&self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    /// Affine map over the last axis: `x @ w + bias`, `w: [F, O]`, `bias: [O]`.
    pub fn linear(&self, w: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let f = *shape.last().ok_or_else(|| Error::InvalidArgument("linear on a scalar".into()))?;
        let ws = w.shape();
        if ws.len() != 2 || ws[0] != f {
            return Err(Error::shape(&shape, &ws, "linear: weight rows must equal input width"));
        }
        let rows = shape.iter().product::<usize>() / f.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(vec![rows, f])?
            .matmul(w)?
            .reshape(out_shape)?
            .add(bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    #[test]
    fn identity_and_row_vector_products() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let r = tape.constant(Tensor::from_f64([1, 2], &[1., 0.]).unwrap());
        let c = tape.constant(Tensor::from_f64([2, 1], &[5., 7.]).unwrap());
        let p = r.matmul(c).unwrap();
        assert_eq!(p.shape(), vec![1, 1]);
        assert_eq!(p.value().data(), &[5.]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([3, 2], -1.0, 1.0, &mut rng);
        let report = check_gradients(&[a, b], 0, |tape, v| {
            let w = tape.constant(w.clone());
            Ok(v[0].matmul(v[1])?.mul(w)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_gradients_on_rank3_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let x = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([5], -1.0, 1.0, &mut rng);
        let report = check_gradients(&[x, w, b], 0, |_, v| {
            let y = v[0].linear(v[1], v[2])?;
            assert_eq!(y.shape(), vec![2, 3, 5]);
            Ok(y.silu().sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
