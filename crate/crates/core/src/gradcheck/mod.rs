//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass on gradient-free
//! tapes, so it shares no code path with the backward rules it checks.
//!
//! A probe whose `±h` evaluations move any LeakyReLU/abs input across zero
//! measures a blend of two slopes rather than the derivative; such probes are
//! counted in [`GradReport::kink_skips`] and excluded from the error.

mod suite;

pub use suite::{run_suite, suite_names, SuiteEntry, SUITE_TOLERANCE};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, per unit of loss magnitude.
/// Difference roundoff grows with `|loss|`, so entries whose true gradient is
/// below `REL_FLOOR * max(1, |loss|)` are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    pub kink_skips: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of `f` with respect to every input
/// against central differences. `probes` entries are sampled per input
/// (0 = all entries).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], probes: usize, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (analytic, loss_value, signs) = {
        let tape = Tape::with_kink_tracking();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        let signs = tape.kink_fingerprint();
        tape.backward(loss)?;
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        (grads, loss.value().item(), signs)
    };
    let floor = REL_FLOOR * loss_value.abs().max(1.0);

    let eval = |work: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
        let tape = Tape::with_kink_tracking();
        let vars: Vec<_> = work.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&tape, &vars)?;
        let v = loss.value();
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.item(), tape.kink_fingerprint()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut work = inputs.to_vec();
    let mut report = GradReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if probes == 0 || probes >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, probes).into_vec()
        };
        for j in picks {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let (up, up_signs) = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let (down, down_signs) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if up_signs != signs || down_signs != signs {
                report.kink_skips += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, floor);
            report.probes += 1;
            if err > report.max_rel_err || report.probes == 1 {
                report.max_rel_err = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_straddling_a_kink_are_skipped() {
        let x = Tensor::from_f64([3], &[1e-6, -0.5, 0.7]).unwrap();
        let report = check_gradients(&[x], 0, |_, v| Ok(v[0].leaky_relu(0.2).abs().sum())).unwrap();
        assert_eq!(report.kink_skips, 1);
        assert_eq!(report.probes, 2);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn smooth_functions_skip_nothing() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.0, 1e-7]).unwrap();
        let report = check_gradients(&[x], 0, |_, v| Ok(v[0].mul(v[0])?.exp().sum())).unwrap();
        assert_eq!(report.kink_skips, 0);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
