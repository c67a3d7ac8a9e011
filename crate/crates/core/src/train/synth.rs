//! Synthetic paired data: procedural clean images and seeded degradations.
//!
//! Clean images are smooth gradients overlaid with hard-edged rectangles and
//! disks and a faint oriented texture, so a restorer must keep edges while
//! removing noise. Pair `i` of a [`PairSource`] depends only on the source
//! seed and `i`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::IMAGE_CHANNELS;

pub const MIN_SIGMA_255: f64 = 5.0;
pub const MAX_SIGMA_255: f64 = 50.0;
pub const MIN_BLUR: usize = 3;
pub const MAX_BLUR: usize = 15;
/// Blur directions: 0, 45, 90 and 135 degrees.
pub const BLUR_ANGLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive white Gaussian noise with standard deviation `sigma_255 / 255`.
    /// `0` is the identity; otherwise `5..=50`.
    Gaussian { sigma_255: f64 },
    /// Uniform linear blur of `length` pixels along direction `angle`
    /// (index into 0/45/90/135 degrees). `1` is the identity; otherwise `3..=15`.
    MotionBlur { length: usize, angle: usize },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::Gaussian { sigma_255 } => {
                if sigma_255 != 0.0 && !(MIN_SIGMA_255..=MAX_SIGMA_255).contains(&sigma_255) {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported noise level {sigma_255}/255; use 0 or {MIN_SIGMA_255}..={MAX_SIGMA_255}"
                    )));
                }
            }
            Degradation::MotionBlur { length, angle } => {
                if length != 1 && !(MIN_BLUR..=MAX_BLUR).contains(&length) {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported blur length {length}; use 1 or {MIN_BLUR}..={MAX_BLUR}"
                    )));
                }
                if angle >= BLUR_ANGLES {
                    return Err(Error::InvalidArgument(format!(
                        "blur angle index {angle} out of range 0..{BLUR_ANGLES}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `gaussian:<sigma*255>` or `motion_blur:<length>:<angle index>`.
impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::Gaussian { sigma_255 } => write!(f, "gaussian:{sigma_255}"),
            Degradation::MotionBlur { length, angle } => write!(f, "motion_blur:{length}:{angle}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("degradation `{s}`: expected gaussian:<sigma*255> or motion_blur:<length>:<angle>"));
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let d = match parts[..] {
            ["gaussian", sigma] => Degradation::Gaussian {
                sigma_255: sigma.parse().map_err(|_| bad())?,
            },
            ["motion_blur", length, angle] => Degradation::MotionBlur {
                length: length.parse().map_err(|_| bad())?,
                angle: angle.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        d.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(d)
    }
}

/// A degraded/clean pair of `[H, W, 3]` images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub degradation: Degradation,
    pub seed: u64,
}

/// Procedural clean image, `[height, width, 3]` in `[0, 1]`.
pub fn clean_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Tensor<f32> {
    let color = |rng: &mut R| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    let (c0, c1) = (color(rng), color(rng));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut img = vec![0.0f64; height * width * IMAGE_CHANNELS];
    let norm = (height.max(width).max(2) - 1) as f64;
    for y in 0..height {
        for x in 0..width {
            let t = (0.5 + 0.5 * (gx * x as f64 + gy * y as f64) / norm).clamp(0.0, 1.0);
            for ch in 0..IMAGE_CHANNELS {
                img[(y * width + x) * IMAGE_CHANNELS + ch] = c0[ch] + t * (c1[ch] - c0[ch]);
            }
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let col = color(rng);
        let (cy, cx) = (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64));
        let (ry, rx) = (
            rng.gen_range(0.1..0.4) * height as f64,
            rng.gen_range(0.1..0.4) * width as f64,
        );
        let disk = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disk { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    img[(y * width + x) * IMAGE_CHANNELS..][..IMAGE_CHANNELS].copy_from_slice(&col);
                }
            }
        }
    }
    let freq: f64 = rng.gen_range(0.2..0.8);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.0..0.08);
    let (tx, ty) = (phi.cos(), phi.sin());
    for y in 0..height {
        for x in 0..width {
            let s = amp * (freq * (tx * x as f64 + ty * y as f64)).sin();
            for v in &mut img[(y * width + x) * IMAGE_CHANNELS..][..IMAGE_CHANNELS] {
                *v = (*v + s).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([height, width, IMAGE_CHANNELS], img.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Pixel offsets `(dy, dx)` of a linear blur kernel; all taps weigh equally.
pub fn blur_taps(length: usize, angle: usize) -> Vec<(isize, isize)> {
    let (sy, sx) = [(0, 1), (-1, 1), (1, 0), (1, 1)][angle % BLUR_ANGLES];
    let half = (length as isize - 1) / 2;
    (0..length as isize).map(|k| ((k - half) * sy, (k - half) * sx)).collect()
}

/// Applies `degradation` to `clean` (`[H, W, 3]`); noise is drawn from a
/// generator seeded with `seed`. Output is clamped to `[0, 1]`.
pub fn synthesize_pair(clean: &Tensor<f32>, degradation: Degradation, seed: u64) -> Result<ImageSample> {
    degradation.validate()?;
    let &[h, w, c] = clean.shape() else {
        return Err(Error::InvalidArgument(format!("expected an [H, W, C] image, got {:?}", clean.shape())));
    };
    let src = clean.data();
    let degraded: Vec<f32> = match degradation {
        Degradation::Gaussian { sigma_255 } => {
            let sigma = sigma_255 / 255.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            src.iter()
                .map(|&v| {
                    let n: f64 = rng.sample(StandardNormal);
                    (v as f64 + sigma * n).clamp(0.0, 1.0) as f32
                })
                .collect()
        }
        Degradation::MotionBlur { length, angle } => {
            let taps = blur_taps(length, angle);
            let scale = 1.0 / taps.len() as f64;
            let mut out = vec![0.0f32; src.len()];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for &(dy, dx) in &taps {
                            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            acc += src[(yy * w + xx) * c + ch] as f64;
                        }
                        out[(y * w + x) * c + ch] = (acc * scale).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            out
        }
    };
    Ok(ImageSample {
        degraded: Tensor::new(clean.shape().to_vec(), degraded)?,
        clean: clean.clone(),
        degradation,
        seed,
    })
}

/// Deterministic stream of synthetic pairs at a fixed size.
#[derive(Clone, Debug)]
pub struct PairSource {
    pub height: usize,
    pub width: usize,
    pub degradation: Degradation,
    pub seed: u64,
}

impl PairSource {
    /// Pair `index`: image and noise draw from independent streams of the
    /// source seed.
    pub fn pair(&self, index: u64) -> Result<ImageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let clean = clean_image(self.height, self.width, &mut rng);
        synthesize_pair(&clean, self.degradation, rng.gen())
    }
}
