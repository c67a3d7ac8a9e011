//! Training loop: synthetic batches, restoration loss, AdamW under a cosine
//! schedule, CSV metrics and checkpoints.
//!
//! Everything random flows from the config seed: pair `i` of the training
//! stream is a pure function of `(seed, i)`, and augmentation draws from a
//! generator whose position is saved in every checkpoint. A run resumed
//! from a checkpoint therefore replays the uninterrupted run exactly.
//! Thread count is left to the caller (see [`crate::par::with_threads`]).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::augment::augment;
use crate::train::checkpoint::{Checkpoint, RngState};
use crate::train::config::TrainConfig;
use crate::train::optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::train::synth::{ImageSample, PairSource};
use crate::unet::CuMambaNet;

/// Seed of the held-out pairs; shared by every run so scores compare.
pub const TEST_SEED: u64 = 0x07e5_75e7;
const AUGMENT_STREAM: u64 = 0xa0_9e47;

pub const LOG_HEADER: &str = "step,lr,loss,psnr,ssim";

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Fresh synthetic pairs, drawn in order.
    Stream(PairSource),
    /// A fixed list, cycled.
    Fixed(Vec<ImageSample>),
}

impl TrainData {
    fn pair(&self, index: u64) -> Result<ImageSample> {
        match self {
            TrainData::Stream(src) => src.pair(index),
            TrainData::Fixed(pairs) => {
                if pairs.is_empty() {
                    return Err(Error::InvalidArgument("fixed training set is empty".into()));
                }
                Ok(pairs[(index % pairs.len() as u64) as usize].clone())
            }
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Updates completed, including this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
    /// Of the restored batch against the clean batch.
    pub psnr: f64,
    /// `NaN` when patches are smaller than the SSIM window.
    pub ssim: f64,
}

/// Held-out scores of restored and of unprocessed degraded images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

impl EvalReport {
    pub fn psnr_gain(&self) -> f64 {
        self.psnr - self.input_psnr
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: CuMambaNet<f32>,
    pub optimizer: AdamW<f32>,
    /// Updates applied so far.
    pub step: u64,
    rng: ChaCha8Rng,
    data: TrainData,
}

/// Stacks `[H, W, C]` images into `[B, H, W, C]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape(img.shape(), first.shape(), "stacking images"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(shape, data)
}

/// The held-out pairs of a config: same degradation and patch size, fixed
/// seed.
pub fn test_set(config: &TrainConfig) -> Result<Vec<ImageSample>> {
    let src = PairSource {
        height: config.model.patch.0,
        width: config.model.patch.1,
        degradation: config.degradation,
        seed: TEST_SEED,
    };
    (0..config.test_pairs as u64).map(|i| src.pair(i)).collect()
}

fn batch_ssim(restored: &Tensor<f32>, clean: &Tensor<f32>) -> Result<f64> {
    let s = clean.shape();
    if s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Ok(f64::NAN);
    }
    ssim(restored, clean)
}

impl Trainer {
    /// Fresh network and optimizer, training on the synthetic stream.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let data = TrainData::Stream(PairSource {
            height: config.model.patch.0,
            width: config.model.patch.1,
            degradation: config.degradation,
            seed: config.seed,
        });
        Self::with_data(config, data)
    }

    pub fn with_data(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let net = CuMambaNet::random(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(Self::adamw_config(&config), &net.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(AUGMENT_STREAM);
        Ok(Self {
            config,
            net,
            optimizer,
            step: 0,
            rng,
            data,
        })
    }

    fn adamw_config(config: &TrainConfig) -> AdamWConfig {
        AdamWConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
        }
    }

    /// Rebuilds the exact training state; the data stream is re-derived
    /// from the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        t.restore(ckpt)?;
        Ok(t)
    }

    /// Loads parameters, optimizer state, step and generator position into
    /// a trainer built for the same config.
    pub fn restore(&mut self, ckpt: &Checkpoint<f32>) -> Result<()> {
        ckpt.load_params(&mut self.net.params)?;
        self.optimizer = ckpt.optimizer.clone();
        self.step = ckpt.step;
        self.rng = ckpt.rng.restore();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let p = &self.net.params;
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: p.ids().map(|id| (p.name(id).to_string(), p.value(id).clone())).collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_start: self.config.lr_start,
            lr_end: self.config.lr_end,
            total_steps: self.config.steps,
        }
    }

    /// `(degraded, clean)` batches for the next step.
    fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let b = self.config.batch_size as u64;
        let mut pairs = Vec::with_capacity(b as usize);
        for k in 0..b {
            let pair = self.data.pair(self.step * b + k)?;
            pairs.push(augment(&pair, &mut self.rng, self.config.augment_flip, self.config.augment_rotate)?);
        }
        let degraded = stack(&pairs.iter().map(|p| &p.degraded).collect::<Vec<_>>())?;
        let clean = stack(&pairs.iter().map(|p| &p.clean).collect::<Vec<_>>())?;
        Ok((degraded, clean))
    }

    /// One forward/backward/update. A non-finite loss aborts before the
    /// parameters change.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let lr = self.schedule().lr(self.step)?;
        let (degraded, clean) = self.next_batch()?;
        let tape = Tape::new();
        let p = self.net.params.bind(&tape, true);
        let restored = self.net.forward(&p, tape.constant(degraded))?;
        let loss = self.config.loss.loss(restored, tape.constant(clean.clone()))?;
        let loss_value = loss.value().item().as_f64();
        tape.backward(loss)?;
        let mut grads = p.grads();
        drop(p);
        let restored = (*restored.value()).clone();
        drop(tape);
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                lr,
                loss: loss_value,
                grad_norm,
            });
        }
        self.optimizer.update(&mut self.net.params, &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            lr,
            loss: loss_value,
            grad_norm,
            psnr: psnr(&restored, &clean)?,
            ssim: batch_ssim(&restored, &clean)?,
        })
    }

    /// Trains until `config.steps` updates are done. Writes a CSV row every
    /// `log_every` steps and at the last step, and hands a checkpoint to
    /// `on_checkpoint` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        mut log: Option<&mut dyn Write>,
        mut on_checkpoint: impl FnMut(&Checkpoint<f32>) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        let mut history = Vec::new();
        if let Some(w) = log.as_deref_mut() {
            if self.step == 0 {
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("metrics log", e))?;
            }
        }
        while self.step < self.config.steps {
            let stats = self.train_step()?;
            let last = stats.step == self.config.steps;
            let every = self.config.log_every;
            if let Some(w) = log.as_deref_mut() {
                if last || (every > 0 && stats.step % every == 0) {
                    writeln!(
                        w,
                        "{},{:e},{:.6},{:.4},{:.4}",
                        stats.step, stats.lr, stats.loss, stats.psnr, stats.ssim
                    )
                    .map_err(|e| Error::io("metrics log", e))?;
                }
            }
            let every = self.config.checkpoint_every;
            if !last && every > 0 && stats.step % every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
            history.push(stats);
        }
        on_checkpoint(&self.checkpoint())?;
        Ok(history)
    }

    /// Restores each degraded image and scores it against its clean image.
    pub fn evaluate(&self, pairs: &[ImageSample]) -> Result<EvalReport> {
        evaluate(&self.net, pairs)
    }
}

/// Mean PSNR/SSIM over pairs, for restored and for untouched inputs.
pub fn evaluate(net: &CuMambaNet<f32>, pairs: &[ImageSample]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one pair".into()));
    }
    let mut sums = [0.0f64; 4];
    for pair in pairs {
        let x = stack(&[&pair.degraded])?;
        let y = net.infer(&x)?;
        let restored = y.reshape(pair.clean.shape().to_vec())?;
        let small = pair.clean.shape()[0] < SSIM_WINDOW || pair.clean.shape()[1] < SSIM_WINDOW;
        let score = |a: &Tensor<f32>| -> Result<(f64, f64)> {
            let s = if small { f64::NAN } else { ssim(a, &pair.clean)? };
            Ok((psnr(a, &pair.clean)?, s))
        };
        let (p, s) = score(&restored)?;
        let (ip, is) = score(&pair.degraded)?;
        for (acc, v) in sums.iter_mut().zip([p, s, ip, is]) {
            *acc += v;
        }
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        psnr: sums[0] / n,
        ssim: sums[1] / n,
        input_psnr: sums[2] / n,
        input_ssim: sums[3] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::CuMambaConfig;

    fn toy(steps: u64) -> TrainConfig {
        TrainConfig {
            model: CuMambaConfig::toy(),
            steps,
            batch_size: 2,
            lr_start: 1e-3,
            lr_end: 1e-5,
            test_pairs: 2,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_the_initial_state() {
        let mut t = Trainer::new(toy(0)).unwrap();
        let before = t.checkpoint();
        let mut last = None;
        let history = t.run(None, |c| {
            last = Some(c.clone());
            Ok(())
        })
        .unwrap();
        assert!(history.is_empty());
        assert_eq!(last.unwrap(), before);
    }

    #[test]
    fn log_has_header_and_one_row_per_interval() {
        let mut t = Trainer::new(toy(3)).unwrap();
        let mut log = Vec::new();
        t.run(Some(&mut log), |_| Ok(())).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
        assert_eq!(lines[1].split(',').count(), 5);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut t = Trainer::new(toy(2)).unwrap();
        let id = t.net.params.id("output.bias").unwrap();
        t.net.params.set(id, Tensor::full([3], f32::NAN)).unwrap();
        let before = t.net.params.value(id).clone();
        match t.train_step() {
            Err(Error::NonFiniteLoss { step, lr, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(lr, 1e-3);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(t.step, 0);
        assert!(t.net.params.value(id).data()[0].is_nan());
        assert_eq!(before.shape(), &[3]);
    }

    #[test]
    fn runs_are_bit_reproducible_and_resumable() {
        let mut a = Trainer::new(toy(4)).unwrap();
        let full = a.run(None, |_| Ok(())).unwrap();
        let mut b = Trainer::new(toy(4)).unwrap();
        assert_eq!(b.run(None, |_| Ok(())).unwrap(), full);
        assert_eq!(a.checkpoint(), b.checkpoint());

        let mut first = Trainer::new(toy(4)).unwrap();
        first.train_step().unwrap();
        first.train_step().unwrap();
        let bytes = first.checkpoint().encode();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        let tail = resumed.run(None, |_| Ok(())).unwrap();
        assert_eq!(tail, full[2..]);
        assert_eq!(resumed.checkpoint(), a.checkpoint());
    }

    #[test]
    fn restore_rejects_a_different_architecture() {
        let t = Trainer::new(toy(1)).unwrap();
        let mut other = toy(1);
        other.model.base_width = 8;
        let mut u = Trainer::new(other).unwrap();
        assert!(matches!(u.restore(&t.checkpoint()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn evaluate_scores_identity_network_as_input() {
        let t = Trainer::new(toy(1)).unwrap();
        let pairs = test_set(&t.config).unwrap();
        let r = t.evaluate(&pairs).unwrap();
        assert_eq!(r.psnr, r.input_psnr);
        assert_eq!(r.ssim, r.input_ssim);
        assert!(r.input_psnr > 15.0 && r.input_psnr < 30.0, "{r:?}");
    }
}
