//! Browser bindings for three views of the library: the impulse response of
//! a selective scan, synthetic degradation with its scores, and image
//! spectra. The computations live in plain functions returning
//! [`cumamba::Result`]; the `#[wasm_bindgen]` wrappers only convert errors.

use cumamba::fft::dft2;
use cumamba::metrics::{psnr, ssim};
use cumamba::objective::LossConfig;
use cumamba::ssm::{discretize, scan_parallel, scan_sequential};
use cumamba::train::synth::{Degradation, PairSource};
use cumamba::{Error, Result, Tensor};
use wasm_bindgen::prelude::*;

/// Chunk length of the parallel scan in the impulse view.
const SCAN_CHUNK: usize = 16;

/// Longest sequence and largest image side the page may request.
pub const MAX_LENGTH: usize = 4096;
pub const MAX_SIDE: usize = 256;

/// Output of one channel driven by unit impulses at `t = 0` and
/// `t = gate_at`, with `A[n] = -(n + 1)`, `B = C = 1` and no skip term.
/// The step size is `step` everywhere except `gate_step` at `gate_at`, which
/// is how input dependence enters: a large step there both forgets the
/// running state and writes the new input more strongly.
#[wasm_bindgen]
pub struct ImpulseResponse {
    output: Vec<f32>,
    mismatch: f64,
}

#[wasm_bindgen]
impl ImpulseResponse {
    /// `y[t]` from the parallel scan.
    #[wasm_bindgen(getter)]
    pub fn output(&self) -> Vec<f32> {
        self.output.clone()
    }

    /// Largest `|parallel - sequential|` over the sequence.
    #[wasm_bindgen(getter)]
    pub fn mismatch(&self) -> f64 {
        self.mismatch
    }
}

pub fn compute_impulse_response(length: usize, state: usize, step: f64, gate_at: usize, gate_step: f64) -> Result<ImpulseResponse> {
    if length == 0 || length > MAX_LENGTH {
        return Err(Error::InvalidArgument(format!("length must be in 1..={MAX_LENGTH}, got {length}")));
    }
    if state == 0 || state > 64 {
        return Err(Error::InvalidArgument(format!("state size must be in 1..=64, got {state}")));
    }
    let mut delta = vec![step; length];
    let mut x = vec![0.0; length];
    x[0] = 1.0;
    if gate_at < length {
        delta[gate_at] = gate_step;
        x[gate_at] = 1.0;
    }
    let delta = Tensor::<f32>::from_f64([length, 1], &delta)?;
    let a = Tensor::<f32>::from_f64([1, state], &(0..state).map(|n| -((n + 1) as f64)).collect::<Vec<_>>())?;
    let ones = Tensor::<f32>::ones([length, state]);
    let (abar, bbar) = discretize(&delta, &a, &ones)?;
    let x = Tensor::<f32>::from_f64([length, 1], &x)?;
    let d = Tensor::<f32>::zeros([1]);
    let parallel = scan_parallel(&abar, &bbar, &x, &ones, &d, SCAN_CHUNK)?;
    let sequential = scan_sequential(&abar, &bbar, &x, &ones, &d)?;
    Ok(ImpulseResponse {
        mismatch: parallel.max_abs_diff(&sequential) as f64,
        output: parallel.into_data(),
    })
}

/// A synthetic clean image, its degraded copy and how far apart they are.
#[wasm_bindgen]
pub struct Degraded {
    side: usize,
    clean: Tensor<f32>,
    degraded: Tensor<f32>,
    psnr: f64,
    ssim: f64,
    charbonnier: f64,
    fourier: f64,
}

#[wasm_bindgen]
impl Degraded {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    /// RGBA bytes, row-major, for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn clean_rgba(&self) -> Vec<u8> {
        to_rgba(&self.clean)
    }

    #[wasm_bindgen(getter)]
    pub fn degraded_rgba(&self) -> Vec<u8> {
        to_rgba(&self.degraded)
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    /// `NaN` below the 11-pixel SSIM window.
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    #[wasm_bindgen(getter)]
    pub fn charbonnier(&self) -> f64 {
        self.charbonnier
    }

    #[wasm_bindgen(getter)]
    pub fn fourier(&self) -> f64 {
        self.fourier
    }

    /// Centered log-magnitude spectrum of the clean image's luminance.
    #[wasm_bindgen(getter)]
    pub fn clean_spectrum_rgba(&self) -> Vec<u8> {
        spectrum_rgba(&self.clean).unwrap_or_default()
    }

    #[wasm_bindgen(getter)]
    pub fn degraded_spectrum_rgba(&self) -> Vec<u8> {
        spectrum_rgba(&self.degraded).unwrap_or_default()
    }
}

/// `degradation` uses the training-config syntax: `gaussian:<sigma*255>` or
/// `motion_blur:<length>:<angle index>`.
pub fn compute_degraded(side: usize, degradation: &str, seed: u64) -> Result<Degraded> {
    if !(2..=MAX_SIDE).contains(&side) {
        return Err(Error::InvalidArgument(format!("image side must be in 2..={MAX_SIDE}, got {side}")));
    }
    let degradation: Degradation = degradation.parse()?;
    let pair = PairSource { height: side, width: side, degradation, seed }.pair(0)?;
    let parts = LossConfig::default().evaluate(&batch(&pair.degraded)?, &batch(&pair.clean)?)?;
    let ssim = if side >= cumamba::metrics::SSIM_WINDOW { ssim(&pair.degraded, &pair.clean)? } else { f64::NAN };
    Ok(Degraded {
        side,
        psnr: psnr(&pair.degraded, &pair.clean)?,
        ssim,
        charbonnier: parts.charbonnier,
        fourier: parts.fourier,
        clean: pair.clean,
        degraded: pair.degraded,
    })
}

fn batch(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(shape)
}

/// `[H, W, 3]` in `[0, 1]` to opaque RGBA bytes.
pub fn to_rgba(image: &Tensor<f32>) -> Vec<u8> {
    image
        .data()
        .chunks_exact(3)
        .flat_map(|px| {
            let [r, g, b] = [0, 1, 2].map(|i| (px[i].clamp(0.0, 1.0) * 255.0).round() as u8);
            [r, g, b, 255]
        })
        .collect()
}

/// Log-magnitude spectrum of the luminance of an `[H, W, 3]` image, DC
/// moved to the center and rescaled to fill `0..=255`, as gray RGBA.
pub fn spectrum_rgba(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::InvalidArgument(format!("expected an [H, W, 3] image, got {:?}", image.shape())));
    };
    let luma: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
        .collect();
    let grid = dft2(&Tensor::<f64>::new([h, w], luma)?)?;
    let mut magnitude = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (re, im) = grid.at((y + h - h / 2) % h, (x + w - w / 2) % w);
            magnitude[y * w + x] = re.hypot(im).ln_1p();
        }
    }
    let peak = magnitude.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    Ok(magnitude
        .iter()
        .flat_map(|&m| {
            let v = (m * scale).round() as u8;
            [v, v, v, 255]
        })
        .collect())
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn impulse_response(length: usize, state: usize, step: f64, gate_at: usize, gate_step: f64) -> Result<ImpulseResponse, JsError> {
    compute_impulse_response(length, state, step, gate_at, gate_step).map_err(js)
}

#[wasm_bindgen]
pub fn degrade(side: usize, degradation: &str, seed: u64) -> Result<Degraded, JsError> {
    compute_degraded(side, degradation, seed).map_err(js)
}
