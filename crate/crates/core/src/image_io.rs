//! 8-bit image interchange: binary PPM (P6) and PNG, decoded to `[H, W, 3]`
//! tensors in `[0, 1]` via `v / 255` and encoded via `round(v * 255)` clamped,
//! so a round trip moves any in-range value by at most `1 / 510`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Sniffs the leading magic bytes.
    pub fn detect(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P6") {
            Ok(ImageFormat::Ppm)
        } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Ok(ImageFormat::Png)
        } else {
            Err(Error::ImageFormat("unsupported format: expected binary PPM (P6) or PNG".into()))
        }
    }

    /// Picks the output format from a `.ppm` or `.png` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::ImageFormat(format!(
                "unsupported output extension on {}: use .ppm or .png",
                path.display()
            ))),
        }
    }
}

pub fn quantize<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    // NaN maps to 0
    if v.is_nan() {
        return 0;
    }
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize<T: Real>(b: u8) -> T {
    T::lit(f64::from(b) / 255.0)
}

fn rgb_shape<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, CHANNELS] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "expected a non-empty [H, W, 3] image, got {:?}",
            image.shape()
        ))),
    }
}

fn from_bytes<T: Real>(height: usize, width: usize, rgb: &[u8]) -> Result<Tensor<T>> {
    Tensor::new([height, width, CHANNELS], rgb.iter().map(|&b| dequantize(b)).collect())
}

/// Binary PPM with maxval 255. Header comments are skipped.
pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::ImageFormat("not a binary PPM (missing P6 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::ImageFormat("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
        *field = token
            .parse()
            .map_err(|_| Error::ImageFormat(format!("malformed PPM header field at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported PPM maxval {maxval}: only 8-bit (255) is read")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!("empty PPM image {width}x{height}")));
    }
    // exactly one whitespace byte ends the header
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::ImageFormat("truncated PPM header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or_else(|| Error::ImageFormat(format!("PPM dimensions {width}x{height} overflow")))?;
    let pixels = &bytes[pos..];
    if pixels.len() < need {
        return Err(Error::ImageFormat(format!(
            "truncated PPM: {width}x{height} needs {need} pixel bytes, found {}",
            pixels.len()
        )));
    }
    from_bytes(height, width, &pixels[..need])
}

pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = rgb_shape(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// PNG of any color type and bit depth, normalized to 8-bit RGB: gray is
/// replicated, alpha is dropped and 16-bit samples keep their high byte.
pub fn decode_png<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_error)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    // the trailing chunks must be present too, or a cut file would pass
    reader.finish().map_err(png_error)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = info.color_type.samples();
    let rgb: Vec<u8> = buf[..info.buffer_size()]
        .chunks_exact(info.line_size)
        .flat_map(|row| row[..w * samples].chunks_exact(samples))
        .flat_map(|px| match px.len() {
            1 | 2 => [px[0], px[0], px[0]],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    from_bytes(h, w, &rgb)
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::ImageFormat("truncated PNG".into())
        }
        other => Error::ImageFormat(format!("PNG decode: {other}")),
    }
}

pub fn encode_png<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = rgb_shape(image)?;
    let (w32, h32) = u32::try_from(w)
        .ok()
        .zip(u32::try_from(h).ok())
        .ok_or_else(|| Error::InvalidArgument(format!("image {h}x{w} too large for PNG")))?;
    let rgb: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, w32, h32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::ImageFormat(format!("PNG encode: {e}"));
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&rgb).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    match ImageFormat::detect(bytes)? {
        ImageFormat::Ppm => decode_ppm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

pub fn encode<T: Real>(image: &Tensor<T>, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Ppm => encode_ppm(image),
        ImageFormat::Png => encode_png(image),
    }
}

/// Reads a PPM or PNG, chosen by content rather than extension.
pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::ImageFormat(msg) => Error::ImageFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a PPM or PNG, chosen by extension.
pub fn write_image<T: Real>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image, ImageFormat::from_path(path)?)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn one_is_exact_and_half_rounds_up() {
        for format in [ImageFormat::Ppm, ImageFormat::Png] {
            let img = Tensor::<f64>::from_f64([1, 2, 3], &[1.0, 1.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
            let back: Tensor<f64> = decode(&encode(&img, format).unwrap()).unwrap();
            assert_eq!(&back.data()[..3], &[1.0; 3]);
            assert_eq!(&back.data()[3..], &[128.0 / 255.0; 3]);
        }
    }

    #[test]
    fn every_byte_level_round_trips_exactly() {
        let levels: Vec<f64> = (0..=255).flat_map(|b| [f64::from(b) / 255.0; 3]).collect();
        let img = Tensor::from_f64([16, 16, 3], &levels).unwrap();
        for format in [ImageFormat::Ppm, ImageFormat::Png] {
            let back: Tensor<f64> = decode(&encode(&img, format).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn round_trip_error_is_at_most_half_a_level() {
        let img = random_image(13, 17, 3);
        for format in [ImageFormat::Ppm, ImageFormat::Png] {
            let back: Tensor<f64> = decode(&encode(&img, format).unwrap()).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn out_of_range_values_clamp() {
        assert_eq!(quantize(-0.3f32), 0);
        assert_eq!(quantize(1.7f32), 255);
        assert_eq!(quantize(f32::NAN), 0);
        assert_eq!(quantize(0.5f32 / 255.0), 1);
    }

    #[test]
    fn ppm_header_comments_and_layout() {
        let mut bytes = b"P6 # made by hand\n2 1\n# maxval next\n255\n".to_vec();
        bytes.extend([0, 51, 255, 255, 0, 102]);
        let img: Tensor<f32> = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[0.0, 0.2, 1.0, 1.0, 0.0, 0.4]);
        let encoded = encode_ppm(&img).unwrap();
        assert!(encoded.starts_with(b"P6\n2 1\n255\n"));
    }

    #[test]
    fn truncated_files_are_errors() {
        let img = random_image(4, 5, 9);
        for format in [ImageFormat::Ppm, ImageFormat::Png] {
            let bytes = encode(&img, format).unwrap();
            for cut in [bytes.len() - 1, bytes.len() / 2, 4] {
                let err = decode::<f32>(&bytes[..cut]).unwrap_err();
                assert!(matches!(err, Error::ImageFormat(_)), "{format:?} cut {cut}: {err}");
            }
        }
        assert!(decode_ppm::<f32>(b"P6\n2 2\n255").is_err());
        assert!(decode_ppm::<f32>(b"P6\n2").is_err());
    }

    #[test]
    fn unsupported_inputs_are_rejected() {
        assert!(matches!(decode::<f32>(b"P3\n1 1\n255\n0 0 0\n"), Err(Error::ImageFormat(_))));
        assert!(matches!(decode::<f32>(b"GIF89a"), Err(Error::ImageFormat(_))));
        assert!(matches!(decode_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::ImageFormat(_))));
        assert!(ImageFormat::from_path(Path::new("x.jpg")).is_err());
        assert_eq!(ImageFormat::from_path(Path::new("x.PNG")).unwrap(), ImageFormat::Png);
        assert!(encode_ppm(&Tensor::<f32>::zeros([2, 2, 4])).is_err());
    }

    #[test]
    fn grayscale_and_alpha_png_become_rgb() {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, 2, 1);
        enc.set_color(png::ColorType::GrayscaleAlpha);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[51, 255, 255, 0]).unwrap();
        writer.finish().unwrap();
        let img: Tensor<f32> = decode(&out).unwrap();
        assert_eq!(img.data(), &[0.2, 0.2, 0.2, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(6, 7, 1);
        for name in ["a.ppm", "b.png"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            let back: Tensor<f64> = read_image(&path).unwrap();
            assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15);
        }
        let missing = read_image::<f32>(dir.path().join("none.ppm")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn quantization_error_bounded(v in 0.0f64..=1.0) {
            let back: f64 = dequantize(quantize(v));
            prop_assert!((back - v).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }
}
