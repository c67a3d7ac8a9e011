//! Parameterized building blocks over the tape primitives.

use rand::Rng;

use crate::autodiff::{ConvKind, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: &mut Init<R>,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.fan_in(&[inputs, outputs], inputs), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([outputs]), false),
            inputs,
            outputs,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.get(self.weight), p.get(self.bias))
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

/// 2-D convolution over `[B, H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: ConvKind,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        init: &mut Init<R>,
    ) -> Self {
        let shape = kind.kernel_shape(c_in, c_out);
        let fan_in = match kind {
            ConvKind::Pointwise1x1 | ConvKind::Transposed2x2 => c_in,
            ConvKind::Depthwise3x3 => 9,
            ConvKind::Strided2x2 => 4 * c_in,
            ConvKind::Plain3x3 => 9 * c_in,
        };
        let bias_len = if kind == ConvKind::Depthwise3x3 { c_in } else { c_out };
        Self {
            weight: store.add(format!("{name}.weight"), init.fan_in(&shape, fan_in), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([bias_len]), false),
            kind,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(self.weight), p.get(self.bias), self.kind)
    }

    pub fn param_count(kind: ConvKind, c_in: usize, c_out: usize) -> usize {
        let w: usize = kind.kernel_shape(c_in, c_out).iter().product();
        w + if kind == ConvKind::Depthwise3x3 { c_in } else { c_out }
    }
}

/// Layer normalization over the channel axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([channels]), false),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([channels]), false),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(self.gain), p.get(self.shift))
    }
}
