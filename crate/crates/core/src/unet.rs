//! Symmetric encoder-decoder over `[B, H, W, 3]` images.
//!
//! Level `l` runs at `H/2^l x W/2^l` with `2^l * C` channels. Encoder levels
//! end in a strided 2x2 downsample; the last level is the bottleneck. Each
//! decoder level upsamples with a transposed 2x2 conv, concatenates the
//! matching encoder feature, fuses back to the level width with a 1x1 conv
//! and runs its blocks. The network predicts a residual: `out = x + R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvKind, Tape, Var};
use crate::blocks::{BlockVariant, MixerBlock, SsmWidths};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::par;
use crate::params::{Bound, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CuMambaConfig {
    pub levels: usize,
    /// Blocks per level; the last entry is the bottleneck depth.
    pub blocks_per_level: Vec<usize>,
    pub base_width: usize,
    pub state_size: usize,
    pub expansion: usize,
    /// `(height, width)` the network accepts.
    pub patch: (usize, usize),
    pub variant: BlockVariant,
}

impl Default for CuMambaConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            blocks_per_level: vec![1; 4],
            base_width: 8,
            state_size: 16,
            expansion: 2,
            patch: (64, 64),
            variant: BlockVariant::FULL,
        }
    }
}

impl CuMambaConfig {
    /// Two levels, 8 channels, 32x32 patches.
    pub fn desk() -> Self {
        Self {
            levels: 2,
            blocks_per_level: vec![1; 2],
            patch: (32, 32),
            ..Self::default()
        }
    }

    /// Smallest useful network, for gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            blocks_per_level: vec![1; 2],
            base_width: 4,
            state_size: 4,
            expansion: 2,
            patch: (16, 16),
            variant: BlockVariant::FULL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.blocks_per_level.len() != self.levels {
            return bad(format!(
                "blocks_per_level has {} entries but levels = {}",
                self.blocks_per_level.len(),
                self.levels
            ));
        }
        if self.blocks_per_level.contains(&0) {
            return bad("every level needs at least one block".into());
        }
        if self.base_width == 0 || self.state_size == 0 || self.expansion == 0 {
            return bad("base_width, state_size and expansion must be positive".into());
        }
        let step = 1usize << self.levels;
        let (h, w) = self.patch;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!("patch {h}x{w} must be a nonzero multiple of 2^levels = {step}"));
        }
        Ok(())
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn resolution_at(&self, level: usize) -> (usize, usize) {
        (self.patch.0 >> level, self.patch.1 >> level)
    }

    fn widths(&self) -> SsmWidths {
        SsmWidths {
            expansion: self.expansion,
            state: self.state_size,
        }
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    up: Conv,
    fuse: Conv,
    blocks: Vec<MixerBlock>,
}

#[derive(Clone)]
pub struct CuMambaNet<T: Real> {
    config: CuMambaConfig,
    pub params: ParamStore<T>,
    input: Conv,
    encoders: Vec<(Vec<MixerBlock>, Conv)>,
    bottleneck: Vec<MixerBlock>,
    /// Indexed by level, `0..levels-1`.
    decoders: Vec<Decoder>,
    output: Conv,
}

impl<T: Real> CuMambaNet<T> {
    /// Builds the network. The output conv always starts at zero, so a fresh
    /// network restores every input to itself.
    pub fn new<R: Rng>(config: CuMambaConfig, init: &mut Init<R>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (c, widths, variant) = (config.base_width, config.widths(), config.variant);
        let input = Conv::new(s, "input", ConvKind::Plain3x3, IMAGE_CHANNELS, c, init);
        let last = config.levels - 1;
        let stage = |s: &mut ParamStore<T>, name: &str, level: usize, init: &mut Init<R>| -> Vec<MixerBlock> {
            (0..config.blocks_per_level[level])
                .map(|i| {
                    MixerBlock::new(
                        s,
                        &format!("{name}.block{i}"),
                        config.width_at(level),
                        config.resolution_at(level),
                        widths,
                        variant,
                        init,
                    )
                })
                .collect()
        };
        let mut encoders = Vec::new();
        for l in 0..last {
            let blocks = stage(s, &format!("enc{l}"), l, init);
            let down = Conv::new(
                s,
                &format!("enc{l}.down"),
                ConvKind::Strided2x2,
                config.width_at(l),
                config.width_at(l + 1),
                init,
            );
            encoders.push((blocks, down));
        }
        let bottleneck = stage(s, "bottleneck", last, init);
        let mut decoders = Vec::new();
        for l in 0..last {
            let up = Conv::new(
                s,
                &format!("dec{l}.up"),
                ConvKind::Transposed2x2,
                config.width_at(l + 1),
                config.width_at(l),
                init,
            );
            let fuse = Conv::new(
                s,
                &format!("dec{l}.fuse"),
                ConvKind::Pointwise1x1,
                2 * config.width_at(l),
                config.width_at(l),
                init,
            );
            let blocks = stage(s, &format!("dec{l}"), l, init);
            decoders.push(Decoder { up, fuse, blocks });
        }
        let output = Conv::new(s, "output", ConvKind::Plain3x3, c, IMAGE_CHANNELS, &mut Init::<R>::Zero);
        Ok(Self {
            config,
            params: store,
            input,
            encoders,
            bottleneck,
            decoders,
            output,
        })
    }

    pub fn random(config: CuMambaConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(config, &mut Init::Random(&mut rng))
    }

    pub fn zeroed(config: CuMambaConfig) -> Result<Self> {
        Self::new(config, &mut Init::<ChaCha8Rng>::Zero)
    }

    pub fn config(&self) -> &CuMambaConfig {
        &self.config
    }

    fn check_input(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        let &[_, h, w, c] = &shape[..] else {
            return Err(Error::InvalidArgument(format!("expected [B, H, W, 3] images, got {shape:?}")));
        };
        if c != IMAGE_CHANNELS {
            return Err(Error::InvalidArgument(format!("expected 3 image channels, got {c}")));
        }
        let (ph, pw) = self.config.patch;
        if (h, w) != (ph, pw) {
            return Err(Error::Resolution {
                expected_h: ph,
                expected_w: pw,
                actual_h: h,
                actual_w: w,
            });
        }
        Ok(())
    }

    fn run_blocks<'t>(blocks: &[MixerBlock], p: &Bound<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for b in blocks {
            x = b.forward(p, x)?;
        }
        Ok(x)
    }

    /// Encoder outputs per level (before downsampling), then the bottleneck
    /// output, plus the bottleneck output again as the decoder's input.
    fn encode<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.check_input(&x)?;
        let mut f = self.input.forward(p, x)?;
        let mut features = Vec::with_capacity(self.config.levels);
        for (blocks, down) in &self.encoders {
            f = Self::run_blocks(blocks, p, f)?;
            features.push(f);
            f = down.forward(p, f)?;
        }
        features.push(Self::run_blocks(&self.bottleneck, p, f)?);
        Ok(features)
    }

    /// Per-level encoder features: level `l` is `[B, H/2^l, W/2^l, 2^l C]`,
    /// the last entry being the bottleneck output.
    pub fn encoder_features<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.encode(p, x)
    }

    /// `x + R(x)` for `[B, H, W, 3]` at the configured patch size.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut features = self.encode(p, x)?;
        let mut f = features.pop().expect("bottleneck feature");
        for (l, dec) in self.decoders.iter().enumerate().rev() {
            let up = dec.up.forward(p, f)?;
            let fused = dec.fuse.forward(p, Var::concat_last(&[up, features[l]])?)?;
            f = Self::run_blocks(&dec.blocks, p, fused)?;
        }
        x.add(self.output.forward(p, f)?)
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let y = self.forward(&p, tape.constant(images.clone()))?;
        Ok((*y.value()).clone())
    }
}

/// Analytic `(parameters, multiply-accumulates per image)`, counted from the
/// configuration alone.
pub fn count_params_flops(config: &CuMambaConfig) -> (usize, usize) {
    let widths = config.widths();
    let mut params = 0;
    let mut flops = 0;
    let mut conv = |kind: ConvKind, c_in: usize, c_out: usize, level: usize| {
        let (h, w) = config.resolution_at(level);
        params += Conv::param_count(kind, c_in, c_out);
        let taps = match kind {
            ConvKind::Pointwise1x1 => c_in * c_out,
            ConvKind::Depthwise3x3 => 9 * c_in,
            // one tap per pixel at the finer resolution
            ConvKind::Strided2x2 | ConvKind::Transposed2x2 => c_in * c_out,
            ConvKind::Plain3x3 => 9 * c_in * c_out,
        };
        flops += taps * h * w;
    };
    let last = config.levels - 1;
    let c = config.base_width;
    conv(ConvKind::Plain3x3, IMAGE_CHANNELS, c, 0);
    conv(ConvKind::Plain3x3, c, IMAGE_CHANNELS, 0);
    for l in 0..last {
        let (cl, cn) = (config.width_at(l), config.width_at(l + 1));
        conv(ConvKind::Strided2x2, cl, cn, l);
        conv(ConvKind::Transposed2x2, cn, cl, l);
        conv(ConvKind::Pointwise1x1, 2 * cl, cl, l);
    }
    for l in 0..config.levels {
        // encoder and decoder stages, except the single bottleneck stage
        let stages = if l == last { 1 } else { 2 };
        let n = stages * config.blocks_per_level[l];
        let (w, res) = (config.width_at(l), config.resolution_at(l));
        params += n * MixerBlock::param_count(w, res, widths, config.variant);
        flops += n * MixerBlock::flops(w, res, widths, config.variant);
    }
    (params, flops)
}

/// Tile origins along one axis: stride `patch - overlap`, last tile flush
/// with the far edge.
fn tile_starts(extent: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut starts = vec![0];
    while starts.last().unwrap() + patch < extent {
        let next = (starts.last().unwrap() + stride).min(extent - patch);
        starts.push(next);
    }
    starts
}

/// Feathering weight of offset `k` in a tile starting at `start`: linear
/// ramps of length `overlap` on sides that border another tile.
fn feather(k: usize, start: usize, patch: usize, extent: usize, overlap: usize) -> f64 {
    let ramp = |d: usize| ((d + 1) as f64 / (overlap + 1) as f64).min(1.0);
    let mut w = 1.0f64;
    if start > 0 {
        w = w.min(ramp(k));
    }
    if start + patch < extent {
        w = w.min(ramp(patch - 1 - k));
    }
    w
}

/// Restores an `[H, W, 3]` image of any size at least one patch by running
/// the network on overlapping tiles and feather-blending the predictions.
pub fn tiled_infer<T: Real>(net: &CuMambaNet<T>, image: &Tensor<T>, overlap: usize) -> Result<Tensor<T>> {
    let (ph, pw) = net.config.patch;
    let &[h, w, c] = image.shape() else {
        return Err(Error::InvalidArgument(format!("expected an [H, W, 3] image, got {:?}", image.shape())));
    };
    if c != IMAGE_CHANNELS {
        return Err(Error::InvalidArgument(format!("expected 3 image channels, got {c}")));
    }
    if h < ph || w < pw {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            patch_h: ph,
            patch_w: pw,
        });
    }
    if 2 * overlap >= ph.min(pw) {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be less than half the patch size {}",
            ph.min(pw)
        )));
    }
    let tiles: Vec<(usize, usize)> = tile_starts(h, ph, overlap)
        .into_iter()
        .flat_map(|y| tile_starts(w, pw, overlap).into_iter().map(move |x| (y, x)))
        .collect();
    let predictions: Vec<Result<Tensor<T>>> = par::map_range(tiles.len(), |i| {
        let (y0, x0) = tiles[i];
        let mut crop = Vec::with_capacity(ph * pw * c);
        for y in y0..y0 + ph {
            crop.extend_from_slice(&image.data()[(y * w + x0) * c..(y * w + x0 + pw) * c]);
        }
        net.infer(&Tensor::new([1, ph, pw, c], crop)?)
    });
    let mut acc = vec![0.0f64; h * w * c];
    let mut total = vec![0.0f64; h * w];
    for (&(y0, x0), pred) in tiles.iter().zip(predictions) {
        let pred = pred?;
        for ky in 0..ph {
            let wy = feather(ky, y0, ph, h, overlap);
            for kx in 0..pw {
                let wgt = wy * feather(kx, x0, pw, w, overlap);
                let pix = (y0 + ky) * w + x0 + kx;
                total[pix] += wgt;
                for ch in 0..c {
                    acc[pix * c + ch] += wgt * pred.data()[(ky * pw + kx) * c + ch].as_f64();
                }
            }
        }
    }
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| T::lit(v / total[i / c]))
        .collect();
    Tensor::new([h, w, c], out)
}
