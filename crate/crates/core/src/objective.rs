//! Restoration objective: Charbonnier data term plus an L1 penalty on the
//! spectrum difference.
//!
//! `loss = mean(sqrt(d^2 + epsilon)) + lambda * sum(|Re dF| + |Im dF|) / (B*H*W*C)`
//! with `d = prediction - target` and `dF` the per-plane 2-D DFT of `d`.
//! Both terms use mean reduction so `lambda` does not depend on resolution.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fft::dft2;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Charbonnier smoothing, `> 0`.
    pub epsilon: f64,
    /// Weight of the frequency term, `>= 0`.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda: 0.1,
        }
    }
}

/// Loss terms of one evaluation, in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub charbonnier: f64,
    pub fourier: f64,
    pub total: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Differentiable total loss on `[B, H, W, C]` maps.
    pub fn loss<'t, T: Real>(&self, prediction: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = difference(prediction, target)?;
        let data = charbonnier_of(d, self.epsilon);
        if self.lambda == 0.0 {
            return Ok(data);
        }
        data.add(fourier_l1_of(d)?.scale(self.lambda))
    }

    /// Loss value without a tape, accumulated in f64.
    pub fn evaluate<T: Real>(&self, prediction: &Tensor<T>, target: &Tensor<T>) -> Result<LossParts> {
        check_pair(prediction.shape(), target.shape())?;
        let diff: Vec<f64> = prediction
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| p.as_f64() - t.as_f64())
            .collect();
        let n = diff.len() as f64;
        let charbonnier = diff.iter().map(|d| (d * d + self.epsilon).sqrt()).sum::<f64>() / n;
        let d = Tensor::<f64>::new(prediction.shape().to_vec(), diff)?;
        let fourier = spectral_l1_sum(&d)? / n;
        Ok(LossParts {
            charbonnier,
            fourier,
            total: charbonnier + self.lambda * fourier,
        })
    }
}

/// `mean(sqrt((prediction - target)^2 + epsilon))`.
pub fn charbonnier<'t, T: Real>(prediction: Var<'t, T>, target: Var<'t, T>, epsilon: f64) -> Result<Var<'t, T>> {
    Ok(charbonnier_of(difference(prediction, target)?, epsilon))
}

/// `sum(|Re dF| + |Im dF|) / (B*H*W*C)` over the per-plane spectra of the
/// difference. `|.|` takes subgradient 0 at 0.
pub fn fourier_l1<'t, T: Real>(prediction: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    fourier_l1_of(difference(prediction, target)?)
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b, "loss operands"));
    }
    if a.len() != 4 {
        return Err(Error::InvalidArgument(format!("loss expects [B, H, W, C] maps, got {a:?}")));
    }
    Ok(())
}

fn difference<'t, T: Real>(prediction: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair(&prediction.shape(), &target.shape())?;
    prediction.sub(target)
}

fn charbonnier_of<'t, T: Real>(d: Var<'t, T>, epsilon: f64) -> Var<'t, T> {
    // d * d is exact at d = 0, unlike a generic power.
    d.mul(d).expect("same shape").shift(epsilon).sqrt().mean()
}

fn fourier_l1_of<'t, T: Real>(d: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = d.value().len() as f64;
    Ok(d.dft2()?.abs().sum().scale(1.0 / n))
}

/// `sum(|Re| + |Im|)` over every plane's spectrum of a `[B, H, W, C]` map.
fn spectral_l1_sum(d: &Tensor<f64>) -> Result<f64> {
    let s = d.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut plane = Tensor::<f64>::zeros([h, w]);
    let mut total = 0.0;
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                plane.data_mut()[p] = d.data()[(bi * h * w + p) * c + ch];
            }
            let grid = dft2(&plane)?;
            total += grid.re.iter().chain(&grid.im).map(|v| v.abs()).sum::<f64>();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn taped(cfg: LossConfig, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        let tape = Tape::new();
        let loss = cfg.loss(tape.constant(a.clone()), tape.constant(b.clone()))?;
        let v = loss.value().item();
        Ok(v)
    }

    #[test]
    fn identical_images_give_sqrt_epsilon() {
        let x = random([2, 4, 6, 3], 1);
        let v = taped(LossConfig::default(), &x, &x).unwrap();
        assert!((v - 1e-3f64.sqrt()).abs() < 1e-15, "{v}");
        assert!((v - 0.0316228).abs() < 1e-7);
        let parts = LossConfig::default().evaluate(&x, &x).unwrap();
        assert_eq!(parts.fourier, 0.0);
    }

    #[test]
    fn unit_difference_charbonnier() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let v = charbonnier(a, b, 1e-3).unwrap().value().item();
        assert!((v - 1.001f64.sqrt()).abs() < 1e-15);
        assert!((v - 1.0005).abs() < 1e-6);
    }

    #[test]
    fn taped_loss_matches_direct_recomputation() {
        let cfg = LossConfig::default();
        let (a, b) = (random([2, 8, 5, 3], 2), random([2, 8, 5, 3], 3));
        let taped = taped(cfg, &a, &b).unwrap();
        let direct = cfg.evaluate(&a, &b).unwrap();
        // independent elementwise Charbonnier
        let mut sum = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sum += ((x - y).powi(2) + 1e-3).sqrt();
        }
        assert!((direct.charbonnier - sum / a.len() as f64).abs() < 1e-12);
        assert!((taped - direct.total).abs() < 1e-7, "{taped} vs {direct:?}");
    }

    #[test]
    fn constant_offset_only_moves_the_dc_bin() {
        let c = 0.3;
        let b = random([1, 4, 4, 2], 4);
        let a = b.map(|v| v + c);
        let parts = LossConfig::default().evaluate(&a, &b).unwrap();
        // each plane: |DC| = 16c, other bins 0; mean over 4*4*2 entries
        assert!((parts.fourier - 2.0 * 16.0 * c / 32.0).abs() < 1e-12, "{parts:?}");
        let tape = Tape::new();
        let v = fourier_l1(tape.constant(a), tape.constant(b)).unwrap().value().item();
        assert!((v - c).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 4, 4, 3]));
        let b = tape.constant(Tensor::zeros([1, 4, 4, 1]));
        assert!(matches!(LossConfig::default().loss(a, b), Err(Error::ShapeMismatch { .. })));
        let x = Tensor::<f64>::zeros([1, 4, 4, 3]);
        assert!(LossConfig::default().evaluate(&x, &Tensor::zeros([1, 4, 3, 3])).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(LossConfig { epsilon: 0.0, lambda: 0.1 }.validate().is_err());
        assert!(LossConfig { epsilon: 1e-3, lambda: -1.0 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn total_loss_gradients() {
        let (a, b) = (random([2, 4, 6, 2], 5), random([2, 4, 6, 2], 6));
        let cfg = LossConfig::default();
        let report = check_gradients(&[a, b], 0, |_, v| cfg.loss(v[0], v[1])).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.kink_skips * 20 < report.probes, "{report:?}");
    }

    #[test]
    fn parseval_links_spatial_and_spectral_energy() {
        let (a, b) = (random([1, 8, 8, 3], 7), random([1, 8, 8, 3], 8));
        let d = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let spectrum = tape.constant(d.clone()).dft2().unwrap().value();
        let spectral: f64 = spectrum.data().iter().map(|v| v * v).sum();
        let spatial: f64 = d.data().iter().map(|v| v * v).sum();
        // unnormalized DFT: sum |F|^2 = H*W * sum |x|^2
        assert!((spectral / 64.0 - spatial).abs() < 1e-10 * spatial);
    }

    proptest! {
        #[test]
        fn loss_is_at_least_sqrt_epsilon(seed in 0u64..1000, offset in -0.5f64..0.5) {
            let b = random([1, 4, 4, 3], seed);
            let a = b.map(|v| v + offset);
            let v = taped(LossConfig::default(), &a, &b).unwrap();
            prop_assert!(v >= 1e-3f64.sqrt() - 1e-15);
        }

        #[test]
        fn loss_is_symmetric(seed in 0u64..1000) {
            let (a, b) = (random([1, 4, 5, 2], seed), random([1, 4, 5, 2], seed + 1));
            let cfg = LossConfig::default();
            let (ab, ba) = (cfg.evaluate(&a, &b).unwrap(), cfg.evaluate(&b, &a).unwrap());
            prop_assert!((ab.total - ba.total).abs() < 1e-12);
        }
    }
}
