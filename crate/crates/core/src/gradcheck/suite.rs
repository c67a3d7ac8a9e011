//! The full finite-difference suite: every differentiable primitive, the
//! selective SSM block, the spatial, channel and combined mixer blocks, the
//! whole U-Net at a given config, and the training loss. All checks run in
//! f64 with central differences of step [`FD_STEP`](super::FD_STEP).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradReport};
use crate::autodiff::{ConvKind, Tape, Var, LEAKY_SLOPE};
use crate::blocks::{BlockVariant, MixerBlock, SsmWidths};
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::params::{Bound, Init, ParamStore};
use crate::ssm::{ScanMode, SelectiveSsm};
use crate::tensor::Tensor;
use crate::unet::{CuMambaConfig, CuMambaNet};

/// Relative-error bound every suite entry must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Probes sampled per input tensor for the block and network checks; the
/// primitive checks probe every entry.
const MODEL_PROBES: usize = 6;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < SUITE_TOLERANCE
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradReport>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Weighted sum against a fixed random tensor, so every output entry gets a
/// distinct upstream gradient.
fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(y.mul(tape.constant(w.clone()))?.sum())
}

fn unary_check(name: &'static str, lo: f64, hi: f64, op: fn(Var<'_, f64>) -> Var<'_, f64>) -> (String, Check) {
    (
        format!("unary/{name}"),
        Box::new(move |rng| {
            let x = uniform(rng, &[3, 5], lo, hi);
            let w = uniform(rng, &[3, 5], -1.0, 1.0);
            check_gradients(&[x], 0, |tape, v| weighted(tape, op(v[0]), &w))
        }),
    )
}

fn primitive_checks() -> Vec<(String, Check)> {
    let mut checks = vec![
        unary_check("exp", -2.0, 2.0, |x| x.exp()),
        unary_check("softplus", -3.0, 3.0, |x| x.softplus()),
        unary_check("silu", -3.0, 3.0, |x| x.silu()),
        unary_check("leaky_relu", -2.0, 2.0, |x| x.leaky_relu(LEAKY_SLOPE)),
        unary_check("abs", -2.0, 2.0, |x| x.abs()),
        unary_check("sqrt", 0.2, 2.0, |x| x.sqrt()),
        unary_check("scale", -2.0, 2.0, |x| x.scale(-1.7)),
        unary_check("shift", -2.0, 2.0, |x| x.shift(0.3)),
    ];
    checks.push((
        "binary/broadcast".into(),
        Box::new(|rng| {
            let a = uniform(rng, &[2, 1, 3], -1.0, 1.0);
            let b = uniform(rng, &[4, 1], -1.0, 1.0);
            let c = uniform(rng, &[3], -1.0, 1.0);
            check_gradients(&[a, b, c], 0, |_, v| {
                let q = v[0].mul(v[1])?.sub(v[2])?.add(v[0])?;
                Ok(q.mul(q)?.mean())
            })
        }),
    ));
    checks.push((
        "linalg/matmul".into(),
        Box::new(|rng| {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = uniform(rng, &[4, 2], -1.0, 1.0);
            let w = uniform(rng, &[3, 2], -1.0, 1.0);
            check_gradients(&[a, b], 0, |tape, v| weighted(tape, v[0].matmul(v[1])?, &w))
        }),
    ));
    checks.push((
        "linalg/linear".into(),
        Box::new(|rng| {
            let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let w = uniform(rng, &[4, 5], -1.0, 1.0);
            let b = uniform(rng, &[5], -1.0, 1.0);
            let u = uniform(rng, &[2, 3, 5], -1.0, 1.0);
            check_gradients(&[x, w, b], 0, |tape, v| weighted(tape, v[0].linear(v[1], v[2])?, &u))
        }),
    ));
    checks.push((
        "layout/reshape_permute_concat".into(),
        Box::new(|rng| {
            let a = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(rng, &[3, 2, 2], -1.0, 1.0);
            let w = uniform(rng, &[2, 3, 6], -1.0, 1.0);
            check_gradients(&[a, b], 0, |tape, v| {
                let p = v[0].permute(&[1, 0, 2])?;
                let c = Var::concat_last(&[p, v[1]])?.transpose()?.reshape([2, 3, 6])?;
                weighted(tape, c, &w)
            })
        }),
    ));
    for kind in [
        ConvKind::Plain3x3,
        ConvKind::Depthwise3x3,
        ConvKind::Strided2x2,
        ConvKind::Transposed2x2,
        ConvKind::Pointwise1x1,
    ] {
        checks.push((
            format!("conv/{kind:?}"),
            Box::new(move |rng| {
                let c_out = if kind == ConvKind::Depthwise3x3 { 2 } else { 3 };
                let x = uniform(rng, &[1, 4, 4, 2], -1.0, 1.0);
                let w = uniform(rng, &kind.kernel_shape(2, c_out), -1.0, 1.0);
                let b = uniform(rng, &[c_out], -1.0, 1.0);
                check_gradients(&[x, w, b], 0, |_, v| {
                    let y = v[0].conv2d(v[1], v[2], kind)?;
                    Ok(y.mul(y)?.sum())
                })
            }),
        ));
    }
    checks.push((
        "conv/causal_1d".into(),
        Box::new(|rng| {
            let x = uniform(rng, &[2, 6, 3], -1.0, 1.0);
            let w = uniform(rng, &[4, 3], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            let u = uniform(rng, &[2, 6, 3], -1.0, 1.0);
            check_gradients(&[x, w, b], 0, |tape, v| weighted(tape, v[0].causal_conv1d(v[1], v[2])?, &u))
        }),
    ));
    checks.push((
        "norm/layer_norm".into(),
        Box::new(|rng| {
            let x = uniform(rng, &[2, 3, 5], -1.0, 1.0);
            let g = uniform(rng, &[5], 0.5, 1.5);
            let b = uniform(rng, &[5], -0.5, 0.5);
            let w = uniform(rng, &[2, 3, 5], -1.0, 1.0);
            check_gradients(&[x, g, b], 0, |tape, v| weighted(tape, v[0].layer_norm(v[1], v[2])?, &w))
        }),
    ));
    checks.push((
        "spectral/dft2".into(),
        Box::new(|rng| {
            let x = uniform(rng, &[1, 4, 4, 2], -1.0, 1.0);
            let w = uniform(rng, &[1, 4, 4, 2, 2], -1.0, 1.0);
            check_gradients(&[x], 0, |tape, v| weighted(tape, v[0].dft2()?, &w))
        }),
    ));
    for (label, mode) in [("sequential", ScanMode::Sequential), ("parallel", ScanMode::Parallel { chunk: 3 })] {
        checks.push((
            format!("scan/{label}"),
            Box::new(move |rng| {
                let (b, l, d, n) = (2, 7, 3, 2);
                let inputs = vec![
                    uniform(rng, &[b, l, d], -1.0, 1.0),
                    uniform(rng, &[b, l, d], 0.05, 0.8),
                    uniform(rng, &[d, n], -2.0, -0.2),
                    uniform(rng, &[b, l, n], -1.0, 1.0),
                    uniform(rng, &[b, l, n], -1.0, 1.0),
                    uniform(rng, &[d], -1.0, 1.0),
                ];
                let w = uniform(rng, &[b, l, d], -1.0, 1.0);
                check_gradients(&inputs, 0, |tape, x| {
                    weighted(tape, x[0].selective_scan(x[1], x[2], x[3], x[4], x[5], mode)?, &w)
                })
            }),
        ));
    }
    checks
}

/// Gradients with respect to every parameter of `store` and the input `x`.
fn module_check<F>(store: &ParamStore<f64>, x: Tensor<f64>, probes: usize, forward: F) -> Result<GradReport>
where
    F: for<'t> Fn(&Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut inputs = store.tensors();
    inputs.push(x);
    check_gradients(&inputs, probes, |_, v| {
        let (params, input) = v.split_at(v.len() - 1);
        forward(&Bound::from_vars(params), input[0])
    })
}

fn model_checks(model: &CuMambaConfig) -> Vec<(String, Check)> {
    let widths = SsmWidths {
        expansion: 2,
        state: 4,
    };
    let mut checks: Vec<(String, Check)> = vec![(
        "ssm/selective_block".into(),
        Box::new(|rng| {
            let mut store = ParamStore::new();
            let block = SelectiveSsm::new(&mut store, "ssm", 3, 2, 4, &mut Init::Random(&mut *rng));
            let x = uniform(rng, &[2, 5, 3], -1.0, 1.0);
            let w = uniform(rng, &[2, 5, 3], -1.0, 1.0);
            module_check(&store, x, 0, |p, x| {
                let y = block.forward(p, x)?;
                Ok(y.mul(x.tape().constant(w.clone()))?.sum())
            })
        }),
    )];
    for (label, variant) in [
        ("spatial", BlockVariant::SPATIAL_ONLY),
        ("channel", BlockVariant::CHANNEL_ONLY),
        ("spatial_channel", BlockVariant::FULL),
    ] {
        checks.push((
            format!("block/{label}"),
            Box::new(move |rng| {
                let (h, w, c) = (4, 4, 3);
                let mut store = ParamStore::new();
                let block = MixerBlock::new(&mut store, "b", c, (h, w), widths, variant, &mut Init::Random(&mut *rng));
                // norm gains and shifts start at 1 and 0; move them so their
                // gradients are not evaluated at a special point
                for id in store.ids().collect::<Vec<_>>() {
                    if !store.decays(id) {
                        let t = store.value(id).map(|v| v + 0.1);
                        store.set(id, t)?;
                    }
                }
                let x = uniform(rng, &[1, h, w, c], 0.0, 1.0);
                let u = uniform(rng, &[1, h, w, c], 0.0, 1.0);
                module_check(&store, x, MODEL_PROBES, |p, x| {
                    Ok(block.forward(p, x)?.mul(x.tape().constant(u.clone()))?.sum())
                })
            }),
        ));
    }
    let model = model.clone();
    checks.push((
        "unet/end_to_end".into(),
        Box::new(move |rng| {
            let seed = rand::Rng::gen(rng);
            let mut net = CuMambaNet::<f64>::random(model.clone(), seed)?;
            // the output projection starts at zero, which would cut every
            // upstream gradient; randomize it
            let out = net.params.id("output.weight").ok_or_else(|| Error::InvalidArgument("network has no output.weight".into()))?;
            let w = uniform(rng, net.params.value(out).shape(), -0.2, 0.2);
            net.params.set(out, w)?;
            let (h, w) = model.patch;
            let x = uniform(rng, &[1, h, w, 3], 0.0, 1.0);
            let target = uniform(rng, &[1, h, w, 3], 0.0, 1.0);
            module_check(&net.params, x, MODEL_PROBES / 2, |p, x| {
                let d = net.forward(p, x)?.sub(x.tape().constant(target.clone()))?;
                Ok(d.mul(d)?.mean())
            })
        }),
    ));
    checks.push((
        "loss/charbonnier_fourier".into(),
        Box::new(|rng| {
            let cfg = LossConfig::default();
            let a = uniform(rng, &[2, 4, 4, 3], 0.0, 1.0);
            let b = uniform(rng, &[2, 4, 4, 3], 0.0, 1.0);
            check_gradients(&[a, b], 0, |_, v| cfg.loss(v[0], v[1]))
        }),
    ));
    checks
}

/// Names of the suite entries, in run order.
pub fn suite_names(model: &CuMambaConfig) -> Vec<String> {
    primitive_checks().into_iter().chain(model_checks(model)).map(|(n, _)| n).collect()
}

/// Runs every check; `progress` sees each entry as it finishes. Each check
/// draws its data from its own stream of `seed`, so entries do not depend
/// on one another.
pub fn run_suite(model: &CuMambaConfig, seed: u64, mut progress: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (i, (name, check)) in primitive_checks().into_iter().chain(model_checks(model)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let entry = SuiteEntry {
            name,
            report: check(&mut rng)?,
        };
        progress(&entry);
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_cover_every_layer_kind() {
        let names = suite_names(&CuMambaConfig::toy());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for prefix in ["unary/", "binary/", "linalg/", "layout/", "conv/", "norm/", "spectral/", "scan/", "ssm/", "block/", "unet/", "loss/"] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
    }

    #[test]
    fn primitive_entries_pass() {
        for (i, (name, check)) in primitive_checks().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            rng.set_stream(i as u64);
            let report = check(&mut rng).unwrap();
            assert!(report.max_rel_err < SUITE_TOLERANCE, "{name}: {report:?}");
        }
    }
}
