//! Gated selective-SSM block.
//!
//! ```text
//! x ─┬─ Linear(F→D) ─ causal conv1d(4) ─ SiLU ─ selective scan ─┐
//!    │                                                          ⊙ ─ Linear(D→F)
//!    └─ Linear(F→D) ─ SiLU ─────────────────────────────────────┘
//! ```
//!
//! `D = E * F`. The step size, input and readout matrices of the scan are
//! projected from the conv branch at every position; the step size goes
//! through a rank-`ceil(D / 16)` bottleneck.

use rand::Rng;

use super::ScanMode;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CONV_WIDTH: usize = 4;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Inner width of the step-size bottleneck for a scan of `width` channels.
pub fn dt_rank(width: usize) -> usize {
    width.div_ceil(16)
}

/// Input-dependent scan parameters of one layer.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `A = -exp(log_decay)`, `[D, N]`; strictly negative by construction.
    pub log_decay: ParamId,
    pub proj_b: Linear,
    pub proj_c: Linear,
    /// `D -> dt_rank(D)`.
    pub proj_dt_rank: Linear,
    /// `dt_rank(D) -> D`; its bias sets the initial step sizes.
    pub proj_dt: Linear,
    /// Skip coefficient around the scan, `[D]`.
    pub skip: ParamId,
    pub width: usize,
    pub state: usize,
}

/// `softplus^{-1}(y) = y + ln(1 - exp(-y))`
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        state: usize,
        init: &mut Init<R>,
    ) -> Self {
        // A[c, n] = -(n + 1)
        let log_decay = Tensor::new(
            [width, state],
            (0..width * state).map(|i| T::lit(((i % state) + 1) as f64).ln()).collect(),
        )
        .unwrap();
        let proj_b = Linear::new(store, &format!("{name}.proj_b"), width, state, init);
        let proj_c = Linear::new(store, &format!("{name}.proj_c"), width, state, init);
        let rank = dt_rank(width);
        let proj_dt_rank = Linear::new(store, &format!("{name}.proj_dt_rank"), width, rank, init);
        let proj_dt = Linear::new(store, &format!("{name}.proj_dt"), rank, width, init);
        if !init.is_zero() {
            let bias: Vec<T> = (0..width)
                .map(|_| {
                    let u = init.uniform(0.0, 1.0).unwrap();
                    let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                    T::lit(inverse_softplus(dt))
                })
                .collect();
            store.set(proj_dt.bias, Tensor::new([width], bias).unwrap()).unwrap();
        }
        Self {
            log_decay: store.add(format!("{name}.log_decay"), log_decay, false),
            proj_b,
            proj_c,
            proj_dt_rank,
            proj_dt,
            skip: store.add(format!("{name}.skip"), Tensor::ones([width]), false),
            width,
            state,
        }
    }

    /// `A = -exp(log_decay)`.
    pub fn decay<'t, T: Real>(&self, p: &Bound<'t, T>) -> Var<'t, T> {
        p.get(self.log_decay).exp().scale(-1.0)
    }

    /// Projects `[B, L, D]` features to `(delta, B, C)`:
    /// `delta = softplus(Linear(Linear(x))) : [B, L, D]`, `B, C : [B, L, N]`.
    pub fn select<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let width = *x.shape().last().unwrap_or(&0);
        if width != self.width {
            return Err(Error::InvalidArgument(format!(
                "select_params: feature width {width} does not match projection width {}",
                self.width
            )));
        }
        let delta = self.proj_dt.forward(p, self.proj_dt_rank.forward(p, x)?)?.softplus();
        Ok((delta, self.proj_b.forward(p, x)?, self.proj_c.forward(p, x)?))
    }

    pub fn param_count(width: usize, state: usize) -> usize {
        width * state
            + 2 * Linear::param_count(width, state)
            + Linear::param_count(width, dt_rank(width))
            + Linear::param_count(dt_rank(width), width)
            + width
    }
}

#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub in_x: Linear,
    pub in_gate: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SsmParams,
    pub out: Linear,
    pub mode: ScanMode,
}

impl SelectiveSsm {
    /// Feature width `features`, inner width `expansion * features`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        features: usize,
        expansion: usize,
        state: usize,
        init: &mut Init<R>,
    ) -> Self {
        let inner = expansion * features;
        let in_x = Linear::new(store, &format!("{name}.in_x"), features, inner, init);
        let in_gate = Linear::new(store, &format!("{name}.in_gate"), features, inner, init);
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            init.fan_in(&[CONV_WIDTH, inner], CONV_WIDTH),
            true,
        );
        let conv_bias = store.add(format!("{name}.conv.bias"), Tensor::zeros([inner]), false);
        let ssm = SsmParams::new(store, &format!("{name}.ssm"), inner, state, init);
        let out = Linear::new(store, &format!("{name}.out"), inner, features, init);
        Self {
            in_x,
            in_gate,
            conv_weight,
            conv_bias,
            ssm,
            out,
            mode: ScanMode::default(),
        }
    }

    pub fn features(&self) -> usize {
        self.in_x.inputs
    }

    /// `[B, L, F] -> [B, L, F]`, causal along `L`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let u = self
            .in_x
            .forward(p, x)?
            .causal_conv1d(p.get(self.conv_weight), p.get(self.conv_bias))?
            .silu();
        let (delta, b, c) = self.ssm.select(p, u)?;
        let y = u.selective_scan(delta, self.ssm.decay(p), b, c, p.get(self.ssm.skip), self.mode)?;
        let gate = self.in_gate.forward(p, x)?.silu();
        self.out.forward(p, y.mul(gate)?)
    }

    pub fn param_count(features: usize, expansion: usize, state: usize) -> usize {
        let inner = expansion * features;
        2 * Linear::param_count(features, inner)
            + CONV_WIDTH * inner
            + inner
            + SsmParams::param_count(inner, state)
            + Linear::param_count(inner, features)
    }

    /// Multiply-accumulates per sequence position.
    pub fn flops_per_token(features: usize, expansion: usize, state: usize) -> usize {
        let inner = expansion * features;
        3 * features * inner + CONV_WIDTH * inner + inner * (2 * state + 2 * dt_rank(inner)) + 3 * inner * state
    }
}
