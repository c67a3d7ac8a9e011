//! Feature-map blocks over `[B, H, W, C]`.
//!
//! Both SSM blocks share a local preamble (LayerNorm, 1x1 conv, depthwise
//! 3x3 conv) and a residual around the whole block. The spatial block scans
//! the `H*W` pixels in raster order with `C` features per token; the channel
//! block scans the `C` channels top to bottom with `H*W` features per token,
//! which fixes the resolution it accepts at construction.

use rand::Rng;

use crate::autodiff::{ConvKind, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::layers::{Conv, Norm};
use crate::params::{Bound, Init, ParamStore};
use crate::real::Real;
use crate::ssm::SelectiveSsm;

/// Width settings shared by every SSM inside a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmWidths {
    pub expansion: usize,
    pub state: usize,
}

#[derive(Clone, Debug)]
struct Preamble {
    norm: Norm,
    pointwise: Conv,
    depthwise: Conv,
}

impl Preamble {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, init: &mut Init<R>) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), channels),
            pointwise: Conv::new(store, &format!("{name}.pw"), ConvKind::Pointwise1x1, channels, channels, init),
            depthwise: Conv::new(store, &format!("{name}.dw"), ConvKind::Depthwise3x3, channels, channels, init),
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.norm.forward(p, x)?;
        let y = self.pointwise.forward(p, y)?;
        self.depthwise.forward(p, y)
    }

    fn param_count(channels: usize) -> usize {
        2 * channels
            + Conv::param_count(ConvKind::Pointwise1x1, channels, channels)
            + Conv::param_count(ConvKind::Depthwise3x3, channels, channels)
    }
}

fn dims(x: &Var<'_, impl Real>) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::InvalidArgument(format!("expected a [B, H, W, C] map, got {s:?}"))),
    }
}

/// Raster-order scan over pixels.
#[derive(Clone, Debug)]
pub struct SpatialSsmBlock {
    pre: Preamble,
    pub mixer: SelectiveSsm,
}

impl SpatialSsmBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        widths: SsmWidths,
        init: &mut Init<R>,
    ) -> Self {
        Self {
            pre: Preamble::new(store, name, channels, init),
            mixer: SelectiveSsm::new(store, &format!("{name}.ssm"), channels, widths.expansion, widths.state, init),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let pre = self.pre.forward(p, x)?;
        self.scan_path(p, pre)?.add(x)
    }

    /// Flatten to `[B, H*W, C]`, run the SSM, restore the map. Pixel `(i, j)`
    /// of the result depends only on pixels at or before it in raster order.
    pub fn scan_path<'t, T: Real>(&self, p: &Bound<'t, T>, pre: Var<'t, T>) -> Result<Var<'t, T>> {
        let [b, h, w, c] = dims(&pre)?;
        let seq = pre.reshape([b, h * w, c])?;
        self.mixer.forward(p, seq)?.reshape([b, h, w, c])
    }

    pub fn param_count(channels: usize, widths: SsmWidths) -> usize {
        Preamble::param_count(channels) + SelectiveSsm::param_count(channels, widths.expansion, widths.state)
    }
}

/// Top-to-bottom scan over channels; tokens carry whole `H*W` planes.
#[derive(Clone, Debug)]
pub struct ChannelSsmBlock {
    pre: Preamble,
    pub mixer: SelectiveSsm,
    smooth: [Conv; 2],
    height: usize,
    width: usize,
}

impl ChannelSsmBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        resolution: (usize, usize),
        widths: SsmWidths,
        init: &mut Init<R>,
    ) -> Self {
        let (height, width) = resolution;
        let pre = Preamble::new(store, name, channels, init);
        let mixer = SelectiveSsm::new(
            store,
            &format!("{name}.ssm"),
            height * width,
            widths.expansion,
            widths.state,
            init,
        );
        let smooth = [0, 1].map(|i| {
            Conv::new(store, &format!("{name}.smooth{i}"), ConvKind::Depthwise3x3, channels, channels, init)
        });
        Self {
            pre,
            mixer,
            smooth,
            height,
            width,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_resolution(&x)?;
        let pre = self.pre.forward(p, x)?;
        let mut y = self.scan_path(p, pre)?;
        for conv in &self.smooth {
            y = conv.forward(p, y)?.leaky_relu(LEAKY_SLOPE);
        }
        y.add(x)
    }

    /// Transpose to `[B, C, H*W]`, run the SSM, transpose back. Channel `c`
    /// of the result depends only on channels `<= c`.
    pub fn scan_path<'t, T: Real>(&self, p: &Bound<'t, T>, pre: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_resolution(&pre)?;
        let [b, h, w, c] = dims(&pre)?;
        let seq = pre.permute(&[0, 3, 1, 2])?.reshape([b, c, h * w])?;
        self.mixer.forward(p, seq)?.reshape([b, c, h, w])?.permute(&[0, 2, 3, 1])
    }

    fn check_resolution(&self, x: &Var<'_, impl Real>) -> Result<()> {
        let [_, h, w, _] = dims(x)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Resolution {
                expected_h: self.height,
                expected_w: self.width,
                actual_h: h,
                actual_w: w,
            });
        }
        Ok(())
    }

    pub fn param_count(channels: usize, resolution: (usize, usize), widths: SsmWidths) -> usize {
        Preamble::param_count(channels)
            + SelectiveSsm::param_count(resolution.0 * resolution.1, widths.expansion, widths.state)
            + 2 * Conv::param_count(ConvKind::Depthwise3x3, channels, channels)
    }
}

/// Two plain 3x3 convs with LeakyReLU and a residual; the SSM-free baseline.
#[derive(Clone, Debug)]
pub struct ResBlock {
    convs: [Conv; 2],
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, init: &mut Init<R>) -> Self {
        Self {
            convs: [0, 1].map(|i| {
                Conv::new(store, &format!("{name}.conv{i}"), ConvKind::Plain3x3, channels, channels, init)
            }),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.convs[0].forward(p, x)?.leaky_relu(LEAKY_SLOPE);
        self.convs[1].forward(p, y)?.add(x)
    }

    pub fn param_count(channels: usize) -> usize {
        2 * Conv::param_count(ConvKind::Plain3x3, channels, channels)
    }
}

/// Which sub-blocks a network stage contains. Both off selects [`ResBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockVariant {
    pub spatial: bool,
    pub channel: bool,
}

impl BlockVariant {
    pub const FULL: Self = Self {
        spatial: true,
        channel: true,
    };
    pub const SPATIAL_ONLY: Self = Self {
        spatial: true,
        channel: false,
    };
    pub const CHANNEL_ONLY: Self = Self {
        spatial: false,
        channel: true,
    };
    pub const BASELINE: Self = Self {
        spatial: false,
        channel: false,
    };

    pub fn label(self) -> &'static str {
        match (self.spatial, self.channel) {
            (true, true) => "spatial+channel",
            (true, false) => "spatial-only",
            (false, true) => "channel-only",
            (false, false) => "baseline-resblock",
        }
    }
}

/// A spatial block followed by a channel block, either of which may be
/// switched off; with both off, a [`ResBlock`].
// one instance per network stage, so the unboxed SSM variant costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum MixerBlock {
    CuMamba {
        spatial: Option<SpatialSsmBlock>,
        channel: Option<ChannelSsmBlock>,
    },
    Res(ResBlock),
}

impl MixerBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        resolution: (usize, usize),
        widths: SsmWidths,
        variant: BlockVariant,
        init: &mut Init<R>,
    ) -> Self {
        if variant == BlockVariant::BASELINE {
            return MixerBlock::Res(ResBlock::new(store, &format!("{name}.res"), channels, init));
        }
        let spatial = variant
            .spatial
            .then(|| SpatialSsmBlock::new(store, &format!("{name}.spatial"), channels, widths, init));
        let channel = variant.channel.then(|| {
            ChannelSsmBlock::new(store, &format!("{name}.channel"), channels, resolution, widths, init)
        });
        MixerBlock::CuMamba { spatial, channel }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            MixerBlock::CuMamba { spatial, channel } => {
                let mut y = x;
                if let Some(s) = spatial {
                    y = s.forward(p, y)?;
                }
                if let Some(c) = channel {
                    y = c.forward(p, y)?;
                }
                Ok(y)
            }
            MixerBlock::Res(r) => r.forward(p, x),
        }
    }

    pub fn param_count(channels: usize, resolution: (usize, usize), widths: SsmWidths, variant: BlockVariant) -> usize {
        if variant == BlockVariant::BASELINE {
            return ResBlock::param_count(channels);
        }
        let mut n = 0;
        if variant.spatial {
            n += SpatialSsmBlock::param_count(channels, widths);
        }
        if variant.channel {
            n += ChannelSsmBlock::param_count(channels, resolution, widths);
        }
        n
    }

    /// Multiply-accumulate estimate for one image.
    pub fn flops(channels: usize, resolution: (usize, usize), widths: SsmWidths, variant: BlockVariant) -> usize {
        let pixels = resolution.0 * resolution.1;
        if variant == BlockVariant::BASELINE {
            return 2 * 9 * channels * channels * pixels;
        }
        let preamble = pixels * (channels * channels + 9 * channels + 2 * channels);
        let mut n = 0;
        if variant.spatial {
            n += preamble + pixels * SelectiveSsm::flops_per_token(channels, widths.expansion, widths.state);
        }
        if variant.channel {
            n += preamble
                + channels * SelectiveSsm::flops_per_token(pixels, widths.expansion, widths.state)
                + 2 * 9 * channels * pixels;
        }
        n
    }
}
