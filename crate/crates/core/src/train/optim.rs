//! AdamW with decoupled weight decay, cosine learning-rate annealing and
//! global-norm gradient clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// `lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2`,
    /// defined for `0 <= step <= total_steps`.
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "schedule step {step} outside 0..={}",
                self.total_steps
            )));
        }
        if step == 0 {
            return Ok(self.lr_start);
        }
        if step == self.total_steps {
            return Ok(self.lr_end);
        }
        let t = step as f64 / self.total_steps as f64;
        Ok(self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (PI * t).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for every registered parameter, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.value(id).shape().to_vec())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// One update at learning rate `lr`. Weight decay applies only to
    /// parameters registered with `decay = true`.
    ///
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} slots, store {} parameters, {} gradients given",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for id in params.ids() {
            let g = grads[id.index()]
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(params.name(id).to_string()))?;
            if g.shape() != params.value(id).shape() {
                return Err(Error::shape(g.shape(), params.value(id).shape(), "gradient vs parameter"));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        // folding the bias corrections into a step size and epsilon keeps
        // the update identical: m_hat/(sqrt(v_hat)+eps) = (m/bc1)/(sqrt(v)/sqrt(bc2)+eps)
        let inv_bc1 = T::lit(1.0 / (1.0 - c.beta1.powi(t)));
        let inv_sqrt_bc2 = T::lit(1.0 / (1.0 - c.beta2.powi(t)).sqrt());
        let (lr_t, eps) = (T::lit(lr), T::lit(c.epsilon));
        for id in params.ids() {
            let i = id.index();
            let g = grads[i].as_ref().unwrap().data();
            let shrink = if params.decays(id) {
                T::one() - T::lit(lr * c.weight_decay)
            } else {
                T::one()
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * shrink - lr_t * (*m * inv_bc1) / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every gradient entry, accumulated in f64.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> CosineSchedule {
        CosineSchedule {
            lr_start: 5e-5,
            lr_end: 1e-6,
            total_steps: 1000,
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = schedule();
        assert_eq!(s.lr(0).unwrap(), 5e-5);
        assert_eq!(s.lr(1000).unwrap(), 1e-6);
        assert!((s.lr(500).unwrap() - 2.55e-5).abs() < 1e-18);
        assert!(s.lr(1001).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = schedule();
        let lrs: Vec<f64> = (0..=1000).map(|i| s.lr(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([values.len()], values).unwrap(), decay);
        s
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let mut s = store(&[0.3, -1.0], true);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..3 {
            opt.update(&mut s, &[Some(Tensor::zeros([2]))], 1e-2).unwrap();
        }
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0], false);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let lr = 1e-3;
        opt.update(&mut s, &[Some(Tensor::ones([1]))], lr).unwrap();
        let expected = 1.0 - lr / (1.0 + 1e-8);
        assert!((s.value(s.id("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_applies_only_to_flagged_parameters() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::ones([1]), true);
        let b = s.add("b", Tensor::ones([1]), false);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &s,
        );
        opt.update(&mut s, &[Some(Tensor::zeros([1])), Some(Tensor::zeros([1]))], 0.1).unwrap();
        assert!((s.value(w).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.value(b).data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store(&[1.0], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.update(&mut s, &[None], 1e-3).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(w) = 0.5 * sum(c_i w_i^2), grad = c_i w_i
        let curv = [1.0, 4.0, 0.25];
        let mut s = store(&[1.0, -2.0, 3.0], false);
        let id = s.id("w").unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let loss = |s: &ParamStore<f64>| -> f64 {
            s.value(id).data().iter().zip(curv).map(|(w, c)| 0.5 * c * w * w).sum()
        };
        let mut history = vec![loss(&s)];
        for _ in 0..100 {
            let g: Vec<f64> = s.value(id).data().iter().zip(curv).map(|(w, c)| c * w).collect();
            opt.update(&mut s, &[Some(Tensor::from_f64([3], &g).unwrap())], 0.01).unwrap();
            history.push(loss(&s));
        }
        // monotone after the first few bias-corrected steps
        assert!(history[5..].windows(2).all(|w| w[1] < w[0]), "{history:?}");
        assert!(history[100] < 0.5 * history[0]);
    }

    #[test]
    fn matches_textbook_adamw_over_several_steps() {
        let c = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let init = [0.4, -1.3, 2.0];
        let mut s = store(&init, true);
        let id = s.id("w").unwrap();
        let mut opt = AdamW::new(c, &s);
        let (mut p, mut m, mut v) = (init.to_vec(), vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=6 {
            let lr = 1e-2 / t as f64;
            let g: Vec<f64> = p.iter().map(|w| w.sin() + 0.3 * t as f64).collect();
            for j in 0..3 {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / (1.0 - c.beta1.powi(t));
                let v_hat = v[j] / (1.0 - c.beta2.powi(t));
                p[j] = p[j] * (1.0 - lr * c.weight_decay) - lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            opt.update(&mut s, &[Some(Tensor::from_f64([3], &g).unwrap())], lr).unwrap();
        }
        for (got, want) in s.value(id).data().iter().zip(&p) {
            assert!((got - want).abs() < 1e-13, "{got} vs {want}");
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut grads = vec![
            Some(Tensor::<f64>::from_f64([2], &[3.0, 0.0]).unwrap()),
            None,
            Some(Tensor::from_f64([1], &[4.0]).unwrap()),
        ];
        assert_eq!(clip_global_norm(&mut grads, 10.0), 5.0);
        assert_eq!(global_norm(&grads), 5.0);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
    }
}
