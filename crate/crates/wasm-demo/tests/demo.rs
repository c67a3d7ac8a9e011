use cumamba::Tensor;
use cumamba_wasm::{compute_degraded, compute_impulse_response, spectrum_rgba, to_rgba, MAX_LENGTH, MAX_SIDE};

#[test]
fn ungated_impulse_response_is_a_sum_of_decaying_exponentials() {
    let (length, state, step) = (64, 4, 0.1);
    let r = compute_impulse_response(length, state, step, length, 0.0).unwrap();
    assert!(r.mismatch() < 1e-6, "{}", r.mismatch());
    for (t, &y) in r.output().iter().enumerate() {
        let want: f64 = (1..=state).map(|n| step * (-(n as f64) * step * t as f64).exp()).sum();
        assert!((y as f64 - want).abs() < 1e-5, "t={t}: {y} vs {want}");
    }
}

#[test]
fn a_large_gated_step_forgets_the_earlier_impulse() {
    let (length, gate) = (64, 20);
    let quiet = compute_impulse_response(length, 4, 0.05, length, 0.0).unwrap().output();
    let gated = compute_impulse_response(length, 4, 0.05, gate, 5.0).unwrap();
    let y = gated.output();
    assert_eq!(&y[..gate], &quiet[..gate]);
    // exp(-5) of the old state survives; the new impulse is written with weight 5
    assert!(y[gate] > 10.0 * quiet[gate], "{} vs {}", y[gate], quiet[gate]);
    assert!(gated.mismatch() < 1e-5);
}

#[test]
fn impulse_arguments_are_bounded() {
    assert!(compute_impulse_response(0, 4, 0.1, 0, 0.0).is_err());
    assert!(compute_impulse_response(MAX_LENGTH + 1, 4, 0.1, 0, 0.0).is_err());
    assert!(compute_impulse_response(8, 0, 0.1, 0, 0.0).is_err());
    assert!(compute_impulse_response(8, 4, 0.0, 9, 0.0).is_err(), "step sizes must be positive");
}

#[test]
fn gaussian_noise_scores_near_its_nominal_psnr() {
    let d = compute_degraded(64, "gaussian:25", 3).unwrap();
    // 20 log10(255 / 25) = 20.17 dB before clamping to [0, 1], which only removes error
    assert!((20.0..21.5).contains(&d.psnr()), "{}", d.psnr());
    assert!(d.ssim() < 0.9);
    assert!(d.charbonnier() > 1e-3f64.sqrt() && d.fourier() > 0.0);
    assert_eq!(d.clean_rgba().len(), 64 * 64 * 4);
    assert_eq!(d.degraded_spectrum_rgba().len(), 64 * 64 * 4);
}

#[test]
fn identity_degradation_scores_perfectly() {
    let d = compute_degraded(32, "gaussian:0", 1).unwrap();
    assert_eq!(d.psnr(), f64::INFINITY);
    assert_eq!(d.ssim(), 1.0);
    assert!((d.charbonnier() - 1e-3f64.sqrt()).abs() < 1e-12);
    assert_eq!(d.fourier(), 0.0);
    assert_eq!(d.clean_rgba(), d.degraded_rgba());
    assert!(compute_degraded(8, "motion_blur:5:1", 1).unwrap().ssim().is_nan());
}

#[test]
fn bad_degradation_requests_are_rejected() {
    assert!(compute_degraded(1, "gaussian:25", 0).is_err());
    assert!(compute_degraded(MAX_SIDE + 1, "gaussian:25", 0).is_err());
    assert!(compute_degraded(32, "gaussian:500", 0).is_err());
    assert!(compute_degraded(32, "salt", 0).is_err());
}

#[test]
fn constant_image_spectrum_is_a_centered_dc_spike() {
    let (h, w) = (8, 12);
    let rgba = spectrum_rgba(&Tensor::<f32>::full([h, w, 3], 0.5)).unwrap();
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        let expected = if i == (h / 2) * w + w / 2 { 255 } else { 0 };
        assert_eq!(px, [expected, expected, expected, 255], "pixel {i}");
    }
    assert!(spectrum_rgba(&Tensor::<f32>::zeros([4, 4, 1])).is_err());
}

#[test]
fn rgba_conversion_clamps_and_rounds() {
    let image = Tensor::<f32>::new([1, 2, 3], vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.2]).unwrap();
    assert_eq!(to_rgba(&image), vec![0, 128, 255, 255, 0, 255, 51, 255]);
}
