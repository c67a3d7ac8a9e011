use super::{Contributions, NodeId, Op, Unary, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Operation selector for [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpTag {
    Add,
    Sub,
    Mul,
    Exp,
    Softplus,
    Silu,
    LeakyRelu(f64),
}

/// Negative-side slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Broadcast result shape under trailing-dimension rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(a, b, "broadcast")),
        };
    }
    Ok(out)
}

/// Maps flat output indices to flat input indices.
enum Gather {
    Same,
    /// Input equals a trailing block of the output: `i % n`.
    Tail(usize),
    Table(Vec<usize>),
}

impl Gather {
    fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return Gather::Same;
        }
        let trimmed: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return Gather::Tail(numel(trimmed).max(1));
        }
        let nd = out.len();
        let pad = nd - input.len();
        let in_strides = strides(input);
        let eff: Vec<usize> = (0..nd)
            .map(|i| {
                if i < pad || input[i - pad] == 1 {
                    0
                } else {
                    in_strides[i - pad]
                }
            })
            .collect();
        let out_strides = strides(out);
        let table = (0..numel(out))
            .map(|flat| {
                let mut rem = flat;
                let mut src = 0;
                for d in 0..nd {
                    let q = rem / out_strides[d];
                    rem %= out_strides[d];
                    src += q * eff[d];
                }
                src
            })
            .collect();
        Gather::Table(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Gather::Same => i,
            Gather::Tail(n) => i % n,
            Gather::Table(t) => t[i],
        }
    }
}

fn binary_forward<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let n = numel(&shape);
    let (ga, gb) = (Gather::new(a.shape(), &shape), Gather::new(b.shape(), &shape));
    let (ad, bd) = (a.data(), b.data());
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let data = match (&ga, &gb) {
        (Gather::Same, Gather::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n).map(|i| f(ad[ga.at(i)], bd[gb.at(i)])).collect(),
    };
    Tensor::new(shape, data)
}

pub(super) fn binary_backward<T: Real>(
    kind: BinaryKind,
    ia: NodeId,
    ib: NodeId,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &dyn Fn(NodeId) -> bool,
) -> Contributions<T> {
    let out_shape = g.shape();
    let mut res = Vec::with_capacity(2);
    for (which, id, input) in [(0, ia, a), (1, ib, b)] {
        if !needs(id) {
            continue;
        }
        let gather = Gather::new(input.shape(), out_shape);
        let other = if which == 0 { b } else { a };
        let og = Gather::new(other.shape(), out_shape);
        let mut acc = Tensor::zeros(input.shape().to_vec());
        let ad = acc.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let v = match kind {
                BinaryKind::Add => gi,
                BinaryKind::Sub => {
                    if which == 0 {
                        gi
                    } else {
                        -gi
                    }
                }
                BinaryKind::Mul => gi * other.data()[og.at(i)],
            };
            ad[gather.at(i)] += v;
        }
        res.push((id, acc));
    }
    res
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn unary_forward<T: Real>(u: Unary, x: T) -> T {
    match u {
        Unary::Exp => x.exp(),
        Unary::Softplus => softplus(x),
        Unary::Silu => x * sigmoid(x),
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * T::lit(s)
            }
        }
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Scale(c) => x * T::lit(c),
        Unary::Shift(c) => x + T::lit(c),
    }
}

pub(super) fn unary_backward<T: Real>(u: Unary, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xi, &yi), &gi)| {
            let d = match u {
                Unary::Exp => yi,
                Unary::Softplus => sigmoid(xi),
                Unary::Silu => {
                    let s = sigmoid(xi);
                    s * (T::one() + xi * (T::one() - s))
                }
                Unary::LeakyRelu(s) => {
                    if xi > T::zero() {
                        T::one()
                    } else {
                        T::lit(s)
                    }
                }
                Unary::Sqrt => T::lit(0.5) / yi,
                // subgradient 0 at the kink
                Unary::Abs => {
                    if xi > T::zero() {
                        T::one()
                    } else if xi < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                Unary::Scale(c) => T::lit(c),
                Unary::Shift(_) => T::one(),
            };
            gi * d
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(&self, kind: BinaryKind, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = binary_forward(kind, &self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub(crate) fn unary(&self, u: Unary) -> Var<'t, T> {
        let x = self.value();
        if matches!(u, Unary::LeakyRelu(_) | Unary::Abs) {
            self.tape.record_signs(x.data());
        }
        let out = x.map(|v| unary_forward(u, v));
        self.tape.push(out, Op::Unary(u, self.id))
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.unary(Unary::Silu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Unary::Sqrt)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(Unary::Abs)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        self.unary(Unary::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Var<'t, T> {
        self.unary(Unary::Shift(c))
    }

    /// Tag-dispatched elementwise op; binary tags need `other`.
    pub fn elementwise(&self, tag: OpTag, other: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let need = |o: Option<Var<'t, T>>| {
            o.ok_or_else(|| Error::InvalidArgument(format!("{tag:?} needs a second operand")))
        };
        match tag {
            OpTag::Add => self.add(need(other)?),
            OpTag::Sub => self.sub(need(other)?),
            OpTag::Mul => self.mul(need(other)?),
            OpTag::Exp => Ok(self.exp()),
            OpTag::Softplus => Ok(self.softplus()),
            OpTag::Silu => Ok(self.silu()),
            OpTag::LeakyRelu(s) => Ok(self.leaky_relu(s)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn scalar_anchors() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.silu().value().item(), 0.0);
        assert!((z.softplus().value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.elementwise(OpTag::Add, Some(b)).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn binary_tag_without_operand_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        assert!(a.elementwise(OpTag::Mul, None).is_err());
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        let msg = a.add(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcasting_keeps_non_broadcast_extents() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[3], &[10., 20., 30.]));
        let s = a.add(b).unwrap();
        assert_eq!(s.shape(), vec![2, 3]);
        assert_eq!(s.value().data(), &[11., 21., 31., 12., 22., 32.]);
    }

    #[test]
    fn broadcast_gradients_match_finite_differences() {
        let inputs = vec![
            Tensor::uniform([2, 1, 3], -1.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(20)),
            Tensor::uniform([4, 1], -1.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(20)),
            Tensor::uniform([3], -1.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(20)),
        ];
        let report = check_gradients(&inputs, 0, |_, v| {
            let p = v[0].mul(v[1])?;
            let q = p.sub(v[2])?.add(v[0])?;
            Ok(q.mul(q)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform([3, 5], -2.0, 2.0, &mut rng);
        for u in [
            Unary::Exp,
            Unary::Softplus,
            Unary::Silu,
            Unary::LeakyRelu(LEAKY_SLOPE),
            Unary::Abs,
            Unary::Scale(-1.7),
            Unary::Shift(0.3),
        ] {
            let report = check_gradients(std::slice::from_ref(&x), 0, |_, v| {
                let y = v[0].unary(u);
                Ok(y.mul(y)?.mean())
            })
            .unwrap();
            // squared outputs near zero leave gradients ~1e-6, where difference roundoff dominates
            assert!(report.max_rel_err < 1e-5, "{u:?}: {report:?}");
        }
        let pos = Tensor::uniform([6], 0.5, 2.0, &mut rng);
        let report = check_gradients(&[pos], 0, |_, v| Ok(v[0].sqrt().sum())).unwrap();
        assert!(report.max_rel_err < 1e-6);
    }
}
