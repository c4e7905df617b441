mod common;

use common::{gradient_check, param_gradient_check, random_tensor, rng};
use machina::codec::{self, entropy, CodecConfig, LatentPair, Quantization};
use machina::tensor::{Graph, ParameterSet, Tensor, Var};
use machina::Error;

fn small_config() -> CodecConfig {
    CodecConfig {
        n_latent_channels: 8,
        n_hyper_channels: 4,
        n_hidden_channels: 8,
        ..CodecConfig::default()
    }
}

fn zero_biases(params: &mut ParameterSet) {
    for (name, p) in params.iter_mut() {
        if name.ends_with(".b") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn sp(params: &ParameterSet, name: &str, bound: f64) -> Tensor {
    params.value(name).unwrap().map(|v| softplus(v) + bound)
}

fn manual_conv(g: &mut Graph, p: &ParameterSet, name: &str, x: Var, stride: usize) -> Var {
    let w = g.constant(p.value(&format!("{name}.w")).unwrap().clone());
    let b = g.constant(p.value(&format!("{name}.b")).unwrap().clone());
    g.conv2d(x, w, b, stride, 1).unwrap()
}

fn manual_gdn(g: &mut Graph, p: &ParameterSet, name: &str, x: Var, inverse: bool) -> Var {
    let beta = g.constant(sp(p, &format!("{name}.beta"), 1e-6));
    let gamma = g.constant(sp(p, &format!("{name}.gamma"), 0.0));
    g.gdn(x, beta, gamma, inverse).unwrap()
}

fn manual_deconv(g: &mut Graph, p: &ParameterSet, name: &str, x: Var, output_padding: usize) -> Var {
    let w = g.constant(p.value(&format!("{name}.w")).unwrap().clone());
    let b = g.constant(p.value(&format!("{name}.b")).unwrap().clone());
    g.conv2d_transpose(x, w, b, 2, 1, output_padding).unwrap()
}

#[test]
fn analysis_shape_for_64px_image() {
    let params = codec::init_codec_params(&CodecConfig::default(), 0).unwrap();
    let x = random_tensor(&mut rng(1), &[1, 3, 64, 64], 0.0, 1.0);
    let y = codec::encode_analysis(&params, &x).unwrap();
    assert_eq!(y.shape(), &[1, 32, 8, 8]);
}

#[test]
fn zero_image_with_zero_biases_gives_zero_latent() {
    let mut params = codec::init_codec_params(&small_config(), 2).unwrap();
    zero_biases(&mut params);
    let y = codec::encode_analysis(&params, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let x = codec::decode_synthesis(&params, &Tensor::zeros(&[1, 8, 4, 4])).unwrap();
    assert_eq!(x.shape(), &[1, 3, 32, 32]);
    assert!(x.data().iter().all(|&v| v == 0.0));
}

#[test]
fn analysis_matches_manual_layer_composition() {
    let params = codec::init_codec_params(&small_config(), 3).unwrap();
    let x = random_tensor(&mut rng(4), &[2, 3, 32, 16], 0.0, 1.0);
    let y = codec::encode_analysis(&params, &x).unwrap();

    let mut g = Graph::new();
    let t = g.constant(x);
    let t = manual_conv(&mut g, &params, "enc.conv0", t, 2);
    let t = manual_gdn(&mut g, &params, "enc.gdn0", t, false);
    let t = manual_conv(&mut g, &params, "enc.conv1", t, 2);
    let t = manual_gdn(&mut g, &params, "enc.gdn1", t, false);
    let t = manual_conv(&mut g, &params, "enc.conv2", t, 2);
    assert!(y.max_abs_diff(g.value(t)) < 1e-12);
}

#[test]
fn synthesis_matches_manual_layer_composition() {
    let params = codec::init_codec_params(&small_config(), 5).unwrap();
    let y_hat = random_tensor(&mut rng(6), &[1, 8, 2, 4], -3.0, 3.0).map(f64::round);
    let x = codec::decode_synthesis(&params, &y_hat).unwrap();

    let mut g = Graph::new();
    let t = g.constant(y_hat);
    let t = manual_deconv(&mut g, &params, "dec.deconv0", t, 1);
    let t = manual_gdn(&mut g, &params, "dec.igdn0", t, true);
    let t = manual_deconv(&mut g, &params, "dec.deconv1", t, 1);
    let t = manual_gdn(&mut g, &params, "dec.igdn1", t, true);
    let t = manual_deconv(&mut g, &params, "dec.deconv2", t, 1);
    let expected = g.value(t).map(|v| v.clamp(0.0, 1.0));
    assert_eq!(x.shape(), &[1, 3, 16, 32]);
    assert!(x.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn hyper_forward_shapes_and_scale_bound() {
    let params = codec::init_codec_params(&CodecConfig::default(), 7).unwrap();
    let y = random_tensor(&mut rng(8), &[1, 32, 8, 8], -20.0, 20.0);
    let (h, h_hat, sigma) = codec::hyper_forward(&params, &y).unwrap();
    assert_eq!(h.shape(), &[1, 16, 2, 2]);
    assert_eq!(h_hat, h.map(f64::round));
    assert_eq!(sigma.shape(), y.shape());
    assert!(sigma.data().iter().all(|&s| s >= 0.11));

    // Push the hyper-decoder towards large negative pre-activations.
    let mut pushed = params.clone();
    pushed.get_mut("hdec.conv2.b").unwrap().value = Tensor::full(&[32], -1e3);
    let (_, _, sigma) = codec::hyper_forward(&pushed, &y).unwrap();
    assert!(sigma.data().iter().all(|&s| s >= 0.11));
}

#[test]
fn hyper_forward_matches_manual_layer_composition() {
    let params = codec::init_codec_params(&small_config(), 9).unwrap();
    let y = random_tensor(&mut rng(10), &[1, 8, 6, 4], -5.0, 5.0);
    let (_, h_hat, sigma) = codec::hyper_forward(&params, &y).unwrap();

    let mut g = Graph::new();
    let t = g.constant(y.map(f64::abs));
    let t = manual_conv(&mut g, &params, "henc.conv0", t, 1);
    let t = g.relu(t).unwrap();
    let t = manual_conv(&mut g, &params, "henc.conv1", t, 2);
    let t = g.relu(t).unwrap();
    let h = manual_conv(&mut g, &params, "henc.conv2", t, 2);
    let hh = g.constant(g.value(h).map(f64::round));
    assert_eq!(g.value(hh), &h_hat);
    // 2x1 -> 3x2 -> 6x4: the axes need different output padding.
    let wv = g.constant(params.value("hdec.deconv0.w").unwrap().clone());
    let bv = g.constant(params.value("hdec.deconv0.b").unwrap().clone());
    let t = g.conv2d_transpose_hw(hh, wv, bv, 2, 1, (0, 1)).unwrap();
    let t = g.relu(t).unwrap();
    let t = manual_deconv(&mut g, &params, "hdec.deconv1", t, 1);
    let t = g.relu(t).unwrap();
    let t = manual_conv(&mut g, &params, "hdec.conv2", t, 1);
    let expected = g.value(t).map(|v| softplus(v) + 0.11);
    assert!(sigma.max_abs_diff(&expected) < 1e-12);

    let y = random_tensor(&mut rng(11), &[1, 8, 8, 8], -5.0, 5.0);
    let (_, h_hat, sigma_sq) = codec::hyper_forward(&params, &y).unwrap();
    let mut g = Graph::new();
    let t = g.constant(h_hat);
    let t = manual_deconv(&mut g, &params, "hdec.deconv0", t, 1);
    let t = g.relu(t).unwrap();
    let t = manual_deconv(&mut g, &params, "hdec.deconv1", t, 1);
    let t = g.relu(t).unwrap();
    let t = manual_conv(&mut g, &params, "hdec.conv2", t, 1);
    let expected = g.value(t).map(|v| softplus(v) + 0.11);
    assert!(sigma_sq.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn round_trip_preserves_shape_for_sizes_up_to_256() {
    let params = codec::init_codec_params(&small_config(), 12).unwrap();
    let mut r = rng(13);
    for (h, w) in [(16, 16), (16, 256), (48, 80), (112, 32), (256, 256)] {
        let x = random_tensor(&mut r, &[1, 3, h, w], 0.0, 1.0);
        let lat = codec::encode_latents(&params, &x).unwrap();
        assert_eq!(lat.sigma.shape(), lat.y.shape());
        let x_hat = codec::decode_synthesis(&params, &lat.y_hat).unwrap();
        assert_eq!(x_hat.shape(), x.shape(), "{h}x{w}");
    }
}

#[test]
fn indivisible_image_is_a_shape_error_asking_for_padding() {
    let params = codec::init_codec_params(&small_config(), 14).unwrap();
    let err = codec::encode_analysis(&params, &Tensor::zeros(&[1, 3, 40, 64])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn decoder_rejects_latent_channel_mismatch() {
    let params = codec::init_codec_params(&small_config(), 15).unwrap();
    let err = codec::decode_synthesis(&params, &Tensor::zeros(&[1, 5, 2, 2])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

/// Gaussian bin mass by composite Simpson integration of the density.
fn simpson_bin_mass(y: f64, sigma: f64) -> f64 {
    let n = 2000;
    let (a, b) = (y - 0.5, y + 0.5);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-(t * t) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn latent_rate_matches_integrated_gaussian() {
    let params = codec::init_codec_params(&small_config(), 16).unwrap();
    let mut r = rng(17);
    let y_hat = random_tensor(&mut r, &[1, 8, 2, 2], -6.0, 6.0).map(f64::round);
    let sigma = random_tensor(&mut r, &[1, 8, 2, 2], 0.11, 8.0);
    let h_hat = Tensor::zeros(&[1, 4, 1, 1]);
    let lat = LatentPair {
        y: y_hat.clone(),
        y_hat: y_hat.clone(),
        h: h_hat.clone(),
        h_hat,
        sigma: sigma.clone(),
    };
    let report = codec::rate_estimate(&lat, &params, 256).unwrap();
    let oracle: f64 = y_hat
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&y, &s)| -simpson_bin_mass(y, s).max(1e-9).log2())
        .sum();
    assert!((report.bits_latent_est - oracle).abs() < 1e-6 * oracle.max(1.0), "{} vs {oracle}", report.bits_latent_est);
    assert!(report.bits_hyper_est >= 0.0);
    let bpp = (report.bits_latent_est + report.bits_hyper_est) / 256.0;
    assert!((report.bpp_est - bpp).abs() < 1e-15);
}

#[test]
fn single_half_mass_element_is_one_bit_per_pixel() {
    let (mut lo, mut hi) = (0.11, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy::gaussian_bin_mass(0.0, mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut g = Graph::new();
    let y = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let s = g.constant(Tensor::full(&[1, 1, 1, 1], lo));
    let p = entropy::gaussian_likelihood(&mut g, y, s).unwrap();
    let b = codec::bits(&mut g, p).unwrap();
    assert!((g.value(b).item().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn zero_pixels_is_a_contract_error() {
    let params = codec::init_codec_params(&small_config(), 18).unwrap();
    let lat = codec::encode_latents(&params, &Tensor::zeros(&[1, 3, 16, 16])).unwrap();
    assert!(matches!(codec::rate_estimate(&lat, &params, 0), Err(Error::Contract(_))));
}

#[test]
fn gaussian_likelihood_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let y = random_tensor(&mut r, &[1, 2, 3, 3], -4.0, 4.0);
        let s = random_tensor(&mut r, &[1, 2, 3, 3], 0.2, 4.0);
        let err = gradient_check(&[y, s], |g, v| {
            let p = entropy::gaussian_likelihood(g, v[0], v[1])?;
            codec::bits(g, p)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn factorized_likelihood_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let mut params = entropy::init_factorized(3, &mut r).unwrap();
        // Move away from the symmetric init so every parameter matters.
        for (_, p) in params.iter_mut() {
            let jitter = random_tensor(&mut r, p.value.shape(), -0.3, 0.3);
            p.value = Tensor::from_fn(p.value.shape(), |i| p.value.data()[i] + jitter.data()[i]);
        }
        let h = random_tensor(&mut r, &[2, 3, 2, 2], -4.0, 4.0).map(f64::round);
        let (err, name) = param_gradient_check(&params, usize::MAX, |g, p| {
            let hv = g.constant(h.clone());
            let lik = entropy::factorized_likelihood(g, p, hv)?;
            codec::bits(g, lik)
        });
        assert!(err < 1e-6, "seed {seed}: {name} {err}");

        let hc = random_tensor(&mut r, &[1, 3, 2, 2], -3.0, 3.0);
        let err = gradient_check(&[hc], |g, v| {
            let lik = entropy::factorized_likelihood(g, &params, v[0])?;
            codec::bits(g, lik)
        });
        assert!(err < 1e-6, "seed {seed}: input {err}");
    }
}

#[test]
fn train_mode_rate_is_finite_and_differentiable() {
    let params = codec::init_codec_params(&small_config(), 19).unwrap();
    let x = random_tensor(&mut rng(20), &[1, 3, 16, 16], 0.0, 1.0);
    let (err, name) = param_gradient_check(&params, 6, |g, p| {
        let xv = g.constant(x.clone());
        let out = codec::forward(g, p, xv, Quantization::Train { seed: 3 })?;
        Ok(out.bpp)
    });
    assert!(err < 1e-6, "{name}: {err}");
}

#[test]
fn eval_forward_agrees_with_tensor_helpers() {
    let params = codec::init_codec_params(&small_config(), 21).unwrap();
    let x = random_tensor(&mut rng(22), &[2, 3, 32, 32], 0.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = codec::forward(&mut g, &params, xv, Quantization::Eval).unwrap();
    let lat = codec::encode_latents(&params, &x).unwrap();
    assert_eq!(g.value(out.y_hat), &lat.y_hat);
    assert_eq!(g.value(out.h_hat), &lat.h_hat);
    assert_eq!(g.value(out.sigma), &lat.sigma);
    let report = codec::rate_estimate(&lat, &params, 2 * 32 * 32).unwrap();
    assert!((g.value(out.bpp).item().unwrap() - report.bpp_est).abs() < 1e-9);
}

#[test]
fn quality_table_is_exposed_per_level() {
    assert_eq!(codec::QUALITY_LAMBDAS, [0.003, 0.01, 0.03, 0.1]);
    for q in 1..=4u8 {
        let cfg = CodecConfig::for_quality(q).unwrap();
        assert_eq!(cfg.lambda_mse, codec::QUALITY_LAMBDAS[usize::from(q) - 1]);
    }
    assert!(CodecConfig::for_quality(0).is_err());
    assert!(CodecConfig::for_quality(5).is_err());
    let params = codec::init_codec_params(&small_config(), 0).unwrap();
    let back = CodecConfig::from_params(&params, 1).unwrap();
    assert_eq!(back, small_config());
}
