//! Random flips and quarter turns: the eight symmetries of the square.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::synth::ImageSample;

/// `rotate(quarter_turns) ∘ flip`: an optional horizontal mirror followed by
/// counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        flip: false,
        quarter_turns: 0,
    };

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(|i| Self {
            flip: i >= 4,
            quarter_turns: i % 4,
        })
    }

    /// The transform equal to applying `self`, then `next`.
    pub fn then(self, next: Self) -> Self {
        // mirror ∘ rotate(k) = rotate(-k) ∘ mirror
        let carried = if next.flip { 4 - self.quarter_turns } else { self.quarter_turns };
        Self {
            flip: self.flip ^ next.flip,
            quarter_turns: (next.quarter_turns + carried) % 4,
        }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Self {
                flip: false,
                quarter_turns: (4 - self.quarter_turns) % 4,
            }
        }
    }

    /// Source pixel of output pixel `(y, x)` for an `h x w` input.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        // undo the rotation, then the mirror
        let (mut sy, mut sx) = (y, x);
        let (mut ch, mut cw) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        for _ in 0..self.quarter_turns {
            // one counter-clockwise turn maps (r, c) of an R x C image to (C-1-c, r)
            (sy, sx) = (sx, ch - 1 - sy);
            (ch, cw) = (cw, ch);
        }
        debug_assert_eq!((ch, cw), (h, w));
        if self.flip {
            sx = w - 1 - sx;
        }
        (sy, sx)
    }

    /// Transforms an `[H, W, C]` image.
    pub fn apply<T: Real>(self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let &[h, w, c] = image.shape() else {
            return Err(Error::InvalidArgument(format!("expected an [H, W, C] image, got {:?}", image.shape())));
        };
        let (oh, ow) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let src = image.data();
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                out.extend_from_slice(&src[(sy * w + sx) * c..][..c]);
            }
        }
        Tensor::new([oh, ow, c], out)
    }

    /// Flip with probability 1/2 (if enabled), quarter turns uniform over
    /// 0..4 (if enabled).
    pub fn sample<R: Rng>(rng: &mut R, flip: bool, rotate: bool) -> Self {
        let f = rng.gen_bool(0.5);
        let k = rng.gen_range(0..4u8);
        Self {
            flip: flip && f,
            quarter_turns: if rotate { k } else { 0 },
        }
    }
}

/// Applies one random symmetry to both images of a pair.
pub fn augment<R: Rng>(sample: &ImageSample, rng: &mut R, flip: bool, rotate: bool) -> Result<ImageSample> {
    let shape = sample.clean.shape();
    if rotate && shape.len() == 3 && shape[0] != shape[1] {
        return Err(Error::InvalidArgument(format!(
            "rotation augmentation needs square patches, got {}x{}",
            shape[0], shape[1]
        )));
    }
    let t = Dihedral::sample(rng, flip, rotate);
    Ok(ImageSample {
        degraded: t.apply(&sample.degraded)?,
        clean: t.apply(&sample.clean)?,
        ..sample.clone()
    })
}
