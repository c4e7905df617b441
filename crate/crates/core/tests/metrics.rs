mod common;

use common::oracles::{bytes_to_image, pair, stack, MS_SSIM_REFERENCES};
use machina::codec::{self, CodecConfig};
use machina::coder::{Bitstream, HEADER_LEN, VERSION};
use machina::metrics::{
    build_curves, evaluate_codec, measure_bpp, ms_ssim, ms_ssim_scales, ms_ssim_weights, nearest_deltas, parse_points,
    points_to_csv, psnr, write_curves, CurvePoint, CURVE_HEADER, DELTA_HEADER, MS_SSIM_WEIGHTS,
};
use machina::regimes::Regime;
use machina::task::{self, init_detector_params};
use machina::tensor::Tensor;
use machina::Error;

#[test]
fn psnr_of_identical_images_is_infinite() {
    let (a, _) = pair(16, 16, 0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_of_black_against_white_is_zero() {
    let black = Tensor::zeros(&[1, 3, 8, 8]);
    let white = Tensor::new(&[1, 3, 8, 8], vec![1.0; 192]).unwrap();
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
}

#[test]
fn psnr_matches_direct_formula() {
    let (a, b) = pair(24, 20, 1);
    let to_byte = |v: f64| (v * 255.0).round();
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (to_byte(*x) - to_byte(*y)).powi(2)).sum::<f64>() / a.numel() as f64;
    let expected = 20.0 * 255f64.log10() - 10.0 * mse.log10();
    assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-10);
    // One unit of error in every sample.
    let c = bytes_to_image(4, 4, |_, _, _| 100);
    let d = bytes_to_image(4, 4, |_, _, _| 101);
    assert!((psnr(&c, &d).unwrap() - 48.130803608679105).abs() < 1e-9);
}

#[test]
fn psnr_rejects_mismatched_shapes() {
    let a = Tensor::zeros(&[1, 3, 8, 8]);
    let b = Tensor::zeros(&[1, 3, 8, 4]);
    assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
}

#[test]
fn ms_ssim_of_identical_images_is_one() {
    for (h, w) in [(64, 64), (176, 176)] {
        let (a, _) = pair(h, w, 0);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ms_ssim_is_symmetric_and_bounded() {
    let (a, b) = pair(64, 72, 3);
    let ab = ms_ssim(&a, &b).unwrap();
    let ba = ms_ssim(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab > 0.0 && ab < 1.0);
}

#[test]
fn ms_ssim_matches_reference_implementation() {
    for (h, w, n, scales, expected) in MS_SSIM_REFERENCES {
        assert_eq!(ms_ssim_scales(h, w), scales);
        let (a, b): (Vec<Tensor>, Vec<Tensor>) = (0..n).map(|i| pair(h, w, i)).unzip();
        let got = ms_ssim(&stack(&a), &stack(&b)).unwrap();
        assert!((got - expected).abs() < 1e-4, "{h}x{w}: {got} vs {expected}");
    }
}

#[test]
fn ms_ssim_scale_count_and_weights() {
    assert_eq!(ms_ssim_scales(160, 160), 4);
    assert_eq!(ms_ssim_scales(161, 161), 5);
    assert_eq!(ms_ssim_scales(1000, 1000), 5);
    assert_eq!(ms_ssim_scales(21, 300), 2);
    assert_eq!(ms_ssim_weights(5), MS_SSIM_WEIGHTS.to_vec());
    let w3 = ms_ssim_weights(3);
    assert!((w3.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((w3[0] / w3[1] - MS_SSIM_WEIGHTS[0] / MS_SSIM_WEIGHTS[1]).abs() < 1e-12);
    let tiny = Tensor::zeros(&[1, 3, 10, 10]);
    assert!(matches!(ms_ssim(&tiny, &tiny), Err(Error::Shape(_))));
}

fn stream(total_bytes: usize, w: u16, h: u16) -> Bitstream {
    let payload = total_bytes - HEADER_LEN;
    Bitstream {
        version: VERSION,
        width: w,
        height: h,
        quality: 1,
        latent_channels: 32,
        hyper_channels: 16,
        hyper_payload: vec![7; payload / 4],
        latent_payload: vec![9; payload - payload / 4],
    }
}

#[test]
fn bpp_counts_the_whole_container() {
    let bs = stream(800, 64, 64);
    assert_eq!(bs.len_bytes(), 800);
    assert_eq!(measure_bpp(&bs, 64, 64).unwrap(), 1.5625);
    assert_eq!(measure_bpp(&stream(96, 32, 48), 32, 48).unwrap(), 0.5);
    assert!(matches!(measure_bpp(&bs, 64, 32), Err(Error::Contract(_))));
}

fn point(regime: Regime, q: u8, bpp: f64, map50: f64) -> CurvePoint {
    CurvePoint {
        regime,
        q,
        beta: 0.0,
        bpp,
        map50,
        map5095: map50 / 2.0,
        psnr_db: 20.0 + 10.0 * bpp,
        msssim: 0.8 + bpp / 10.0,
    }
}

#[test]
fn single_point_curve() {
    let c = build_curves(&[point(Regime::Baseline, 1, 0.4, 0.6)]).unwrap();
    assert_eq!(c.per_regime.len(), 1);
    let csv = &c.per_regime[&Regime::Baseline];
    assert_eq!(csv, &format!("{CURVE_HEADER}\nBASELINE,1,0,0.400000,0.600000,0.300000,24.000000,0.840000\n"));
    assert_eq!(c.deltas, format!("{DELTA_HEADER}\n"));
}

#[test]
fn curves_are_sorted_by_rate() {
    let pts = [
        point(Regime::TFt, 3, 1.2, 0.7),
        point(Regime::TFt, 1, 0.4, 0.6),
        point(Regime::TFt, 2, 0.9, 0.65),
    ];
    let csv = &build_curves(&pts).unwrap().per_regime[&Regime::TFt];
    let qs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(qs, ["1", "2", "3"]);
}

#[test]
fn deltas_pair_nearest_rates() {
    let reference = [point(Regime::Baseline, 1, 0.4, 0.60), point(Regime::Baseline, 2, 0.9, 0.65)];
    let curve = [point(Regime::JFt, 1, 0.38, 0.67), point(Regime::JFt, 2, 0.7, 0.70)];
    let d = nearest_deltas(&curve, &reference);
    assert_eq!(d.len(), 2);
    assert_eq!((d[0].0, d[0].1), (0.38, 0.4));
    assert!((d[0].2[0] - 0.07).abs() < 1e-12);
    assert!((d[0].2[2] - (-0.2)).abs() < 1e-12);
    // 0.7 is 0.3 from 0.4 and 0.2 from 0.9.
    assert_eq!(d[1].1, 0.9);
    assert!((d[1].2[0] - 0.05).abs() < 1e-12);
    // Equidistant: the lower rate wins.
    let tie = nearest_deltas(&[point(Regime::JFt, 1, 0.65, 0.7)], &reference);
    assert_eq!(tie[0].1, 0.4);

    let c = build_curves(&[&reference[..], &curve[..]].concat()).unwrap();
    let rows: Vec<&str> = c.deltas.lines().collect();
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows.contains(&"J_FT,BASELINE,0.380000,0.400000,0.070000,0.035000,-0.200000,-0.002000"));
}

#[test]
fn csv_round_trip_and_files() {
    let mut pts = vec![point(Regime::CFt, 2, 0.8, 0.64), point(Regime::JFtFd, 4, 1.3, 0.71)];
    pts[1].psnr_db = f64::INFINITY;
    pts[0].beta = 0.6675;
    let back = parse_points(&points_to_csv(&pts)).unwrap();
    assert_eq!(back, pts);

    let dir = tempfile::tempdir().unwrap();
    let files = write_curves(dir.path(), &pts).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["curves_C_FT.csv", "curves_J_FT_FD.csv", "curve_deltas.csv"]);
    let text = std::fs::read_to_string(&files[1]).unwrap();
    assert_eq!(parse_points(&text).unwrap(), vec![pts[1].clone()]);
}

#[test]
fn invalid_points_and_csv_are_rejected() {
    assert!(matches!(build_curves(&[]), Err(Error::Contract(_))));
    let mut bad = point(Regime::TFt, 1, 0.5, 0.6);
    bad.map50 = 1.5;
    assert!(matches!(build_curves(&[bad]), Err(Error::Contract(_))));
    assert!(parse_points("regime,q\nT_FT,1").is_err());
    assert!(parse_points(&format!("{CURVE_HEADER}\nT_FT,1,0,0.5,0.6")).is_err());
}

#[test]
fn codec_evaluation_is_self_consistent() {
    let cfg = CodecConfig {
        n_latent_channels: 8,
        n_hyper_channels: 4,
        n_hidden_channels: 8,
        ..CodecConfig::default()
    };
    let codec = codec::init_codec_params(&cfg, 0).unwrap();
    let det = init_detector_params(0).unwrap();
    let scenes = task::generate_dataset(3, 30).unwrap();
    let ev = evaluate_codec(&codec, 1, &det, &scenes).unwrap();
    assert_eq!(ev.images.len(), 3);
    assert_eq!(ev.reconstructions.len(), 3);
    let pixels = 64.0 * 64.0;
    for (img, (scene, rec)) in ev.images.iter().zip(scenes.iter().zip(&ev.reconstructions)) {
        assert_eq!(img.bpp_file, 8.0 * img.bytes as f64 / pixels);
        assert_eq!(img.bytes, HEADER_LEN + img.payload_bits / 8);
        assert_eq!(img.psnr_db, psnr(&scene.image, rec).unwrap());
        assert_eq!(img.msssim, ms_ssim(&scene.image, rec).unwrap());
        assert!(rec.data().iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }
    let mean = |f: fn(&machina::metrics::ImageEval) -> f64| ev.images.iter().map(f).sum::<f64>() / 3.0;
    assert!((ev.bpp_file - mean(|i| i.bpp_file)).abs() < 1e-12);
    assert!((ev.bpp_est - mean(|i| i.bpp_est)).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&ev.map.map50));
}
