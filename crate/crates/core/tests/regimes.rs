mod common;

use common::{gated_gradient_check, rng};
use rand::Rng;
use machina::codec::{self, CodecConfig, Quantization};
use machina::regimes::{
    pretrain_codec, pretrain_task, run_regime, run_regime_from_files, total_loss, trainable_groups,
    PretrainCodecConfig, PretrainTaskConfig, Regime, RegimeConfig,
};
use machina::task::{self, data, init_detector_params, DetectorTargets, Scene};
use machina::tensor::{Graph, Group, ParameterSet, Tensor};
use machina::Error;

fn small_codec(seed: u64) -> ParameterSet {
    let cfg = CodecConfig {
        n_latent_channels: 8,
        n_hyper_channels: 4,
        n_hidden_channels: 8,
        ..CodecConfig::default()
    };
    codec::init_codec_params(&cfg, seed).unwrap()
}

fn joint(seed: u64) -> ParameterSet {
    let mut p = small_codec(seed);
    p.extend(init_detector_params(seed).unwrap()).unwrap();
    p
}

fn short_config(regime: Regime, seed: u64) -> RegimeConfig {
    let beta = if regime.trains_codec() { 0.5 } else { 0.0 };
    let mut cfg = RegimeConfig::new(regime, 1, beta);
    cfg.seed = seed;
    cfg.epochs_codec = cfg.epochs_codec.min(1);
    cfg.epochs_task = cfg.epochs_task.min(2);
    cfg.lr_task = 1e-3;
    cfg
}

#[test]
fn trainable_groups_per_regime() {
    assert!(trainable_groups(Regime::Baseline).is_empty());
    assert_eq!(trainable_groups(Regime::TFt), vec![Group::Task]);
    let c = trainable_groups(Regime::CFt);
    assert_eq!(c, Group::CODEC.to_vec());
    assert!(!c.contains(&Group::Task));
    assert_eq!(trainable_groups(Regime::JFt), Group::ALL.to_vec());
    let fd = trainable_groups(Regime::JFtFd);
    assert_eq!(fd.len(), 5);
    assert!(!fd.contains(&Group::Decoder));
}

#[test]
fn regime_names_parse_in_several_spellings() {
    for r in Regime::ALL {
        assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        assert_eq!(r.name().to_lowercase().replace('_', "-").parse::<Regime>().unwrap(), r);
    }
    assert!(matches!("T-FTX".parse::<Regime>(), Err(Error::Config(_))));
}

#[test]
fn config_file_round_trip_and_defaults() {
    let text = "# joint fine-tuning\nregime = J_FT\nq = 2\nbeta = 0.6675\nseed = 3\ninit_codec = ckpt/psi_q2\n";
    let cfg = RegimeConfig::parse(text).unwrap();
    assert_eq!(cfg.regime, Regime::JFt);
    assert_eq!((cfg.q, cfg.beta, cfg.seed), (2, 0.6675, 3));
    assert_eq!((cfg.epochs_codec, cfg.epochs_task), (5, 6));
    assert_eq!((cfg.lr_task, cfg.lr_codec, cfg.batch_size), (0.01, 1e-4, 2));
    assert_eq!(cfg.init_codec.as_deref(), Some(std::path::Path::new("ckpt/psi_q2")));
    assert_eq!(RegimeConfig::parse(&cfg.to_text()).unwrap(), cfg);

    let c = RegimeConfig::parse("regime = C_FT\nbeta = 1.0").unwrap();
    assert_eq!((c.epochs_codec, c.epochs_task), (6, 0));
    let t = RegimeConfig::parse("regime = T_FT").unwrap();
    assert_eq!((t.epochs_codec, t.epochs_task), (0, 6));
}

#[test]
fn config_errors() {
    for bad in [
        "q = 1",
        "regime = J_FT\nbeta = 0.5\ncolour = red",
        "regime = J_FT\nbeta = 0.5\nbeta = 0.6",
        "regime = J_FT",
        "regime = J_FT\nbeta = -1",
        "regime = T_FT\nq = 7",
        "regime = T_FT\nbatch_size = 0",
        "regime = T_FT\nseed = many",
        "regime T_FT",
    ] {
        assert!(matches!(RegimeConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
    }
}

fn batch(n: usize, seed: u64) -> (Tensor, DetectorTargets) {
    let scenes = task::generate_dataset(n, seed).unwrap();
    let refs: Vec<&Scene> = scenes.iter().collect();
    (data::batch_images(&refs).unwrap(), DetectorTargets::from_scenes(&refs).unwrap())
}

#[test]
fn total_is_task_plus_weighted_rate() {
    let (x, targets) = batch(2, 1);
    let params = joint(0);
    for beta in [0.0, 0.1, 0.6675] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = total_loss(&mut g, &params, xv, &targets, beta, Quantization::Train { seed: 4 }, true).unwrap();
        let (lt, lr, total) = (
            g.value(t.task).item().unwrap(),
            g.value(t.rate).item().unwrap(),
            g.value(t.total).item().unwrap(),
        );
        assert!(lt > 0.0 && lr > 0.0);
        if beta == 0.0 {
            assert_eq!(total, lt);
        } else {
            assert!((total - (lt + beta * lr)).abs() <= 1e-12 * total);
        }
    }
}

#[test]
fn rate_is_reported_but_not_optimized_when_excluded() {
    let (x, targets) = batch(1, 2);
    let params = joint(1);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let t = total_loss(&mut g, &params, xv, &targets, 0.5, Quantization::Eval, false).unwrap();
    assert_eq!(t.objective, t.task);
    assert_ne!(t.total, t.task);
}

#[test]
fn total_gradient_is_linear_in_its_terms() {
    let (x, targets) = batch(2, 3);
    let params = joint(2);
    let beta = 0.3186;
    let grad_of = |pick: &dyn Fn(&machina::regimes::LossTerms) -> machina::tensor::Var| {
        let mut p = params.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = total_loss(&mut g, &p, xv, &targets, beta, Quantization::Train { seed: 9 }, true).unwrap();
        g.backward_into(pick(&t), &mut p).unwrap();
        p.get("enc.conv1.w").unwrap().grad.clone().unwrap()
    };
    let total = grad_of(&|t| t.total);
    let task = grad_of(&|t| t.task);
    let rate = grad_of(&|t| t.rate);
    let mut worst: f64 = 0.0;
    for ((a, b), c) in total.data().iter().zip(task.data()).zip(rate.data()) {
        worst = worst.max((a - (b + beta * c)).abs() / a.abs().max(1e-8));
    }
    assert!(worst < 1e-9, "{worst}");
}

/// Zero-initialised biases put some units exactly on a ReLU kink, where
/// no derivative exists; a small random offset moves the check to a
/// generic point.
fn jittered(mut params: ParameterSet, seed: u64) -> ParameterSet {
    let mut r = rng(seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".b")).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().value.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    params
}

#[test]
fn joint_objective_gradients_match_finite_differences() {
    let (x, targets) = batch(1, 4);
    for seed in 0..4 {
        let params = jittered(joint(10 + seed), seed);
        let (err, name) = gated_gradient_check(&params, 4, 3e-4, |g, p| {
            let xv = g.constant(x.clone());
            let t = total_loss(g, p, xv, &targets, 0.6675, Quantization::Train { seed: 5 }, true)?;
            Ok(t.total)
        });
        assert!(err < 1e-6, "seed {seed} {name}: {err}");
    }
}

#[test]
fn non_finite_terms_are_named() {
    let (x, targets) = batch(1, 5);
    let mut params = joint(3);
    params.get_mut("det.conv2.w").unwrap().value.data_mut()[0] = f64::NAN;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    match total_loss(&mut g, &params, xv, &targets, 0.1, Quantization::Eval, true) {
        Err(Error::Numeric { location, .. }) => assert!(location.starts_with("task term"), "{location}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
    let mut params = joint(3);
    params.get_mut("henc.conv0.w").unwrap().value.data_mut()[0] = f64::INFINITY;
    let mut g = Graph::new();
    let xv = g.constant(x);
    match total_loss(&mut g, &params, xv, &targets, 0.1, Quantization::Eval, true) {
        Err(Error::Numeric { location, .. }) => assert!(location.starts_with("rate term"), "{location}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn frozen_groups_keep_their_digests() {
    let scenes = task::generate_dataset(4, 6).unwrap();
    for seed in 0..2 {
        let codec = small_codec(seed);
        let det = init_detector_params(seed).unwrap();
        for regime in Regime::ALL {
            let out = run_regime(&short_config(regime, seed), &scenes, &codec, &det).unwrap();
            let trained = trainable_groups(regime);
            let r = &out.report;
            assert_eq!(r.final_digests.len(), 6);
            for g in Group::ALL {
                if !trained.contains(&g) {
                    assert_eq!(r.initial_digests[&g], r.final_digests[&g], "{regime} {g}");
                }
            }
            let changed = r.changed_groups();
            assert!(changed.iter().all(|g| trained.contains(g)), "{regime}: {changed:?}");
            match regime {
                Regime::Baseline => {
                    assert!(changed.is_empty());
                    assert_eq!(out.codec, codec);
                    assert_eq!(out.task, det);
                }
                Regime::TFt => assert_eq!(changed, vec![Group::Task]),
                Regime::CFt => assert!(!changed.is_empty() && !changed.contains(&Group::Task)),
                Regime::JFt | Regime::JFtFd => {
                    assert!(changed.contains(&Group::Task) && changed.contains(&Group::Encoder))
                }
            }
        }
    }
}

#[test]
fn joint_schedule_ends_with_a_task_only_epoch() {
    let scenes = task::generate_dataset(2, 7).unwrap();
    let mut cfg = RegimeConfig::new(Regime::JFt, 1, 1.0);
    cfg.epochs_codec = 2;
    cfg.epochs_task = 3;
    cfg.lr_task = 1e-3;
    let out = run_regime(&cfg, &scenes, &small_codec(0), &init_detector_params(0).unwrap()).unwrap();
    let trained: Vec<&Vec<Group>> = out.report.epochs.iter().map(|e| &e.trained).collect();
    assert_eq!(trained.len(), 3);
    assert_eq!(trained[0], &Group::ALL.to_vec());
    assert_eq!(trained[2], &vec![Group::Task]);
}

#[test]
fn runs_are_deterministic() {
    let scenes = task::generate_dataset(4, 8).unwrap();
    let codec = small_codec(4);
    let det = init_detector_params(4).unwrap();
    let cfg = short_config(Regime::JFt, 11);
    let a = run_regime(&cfg, &scenes, &codec, &det).unwrap();
    let b = run_regime(&cfg, &scenes, &codec, &det).unwrap();
    assert!(a.report.same_outcome(&b.report));
    let mut other = cfg.clone();
    other.seed = 12;
    let c = run_regime(&other, &scenes, &codec, &det).unwrap();
    assert!(!a.report.same_outcome(&c.report));
}

#[test]
fn missing_checkpoints_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RegimeConfig::new(Regime::TFt, 1, 0.0);
    assert!(matches!(run_regime_from_files(&cfg), Err(Error::Config(_))));
    cfg.init_codec = Some(dir.path().join("nope"));
    cfg.init_task = Some(dir.path().join("nope"));
    cfg.dataset_dir = Some(dir.path().to_path_buf());
    match run_regime_from_files(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("not found"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn incomplete_parameter_sets_are_rejected() {
    let scenes = task::generate_dataset(2, 9).unwrap();
    let cfg = short_config(Regime::TFt, 0);
    let err = run_regime(&cfg, &scenes, &small_codec(0), &ParameterSet::new()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn codec_pretraining_improves_reconstruction() {
    let scenes = task::generate_dataset(128, 20).unwrap();
    let cfg = PretrainCodecConfig {
        epochs: 6,
        ..PretrainCodecConfig::new(1)
    };
    let (params, report) = pretrain_codec(&cfg, &scenes).unwrap();
    assert!(report.diverged.is_none());
    let psnr = |mse: f64| -10.0 * mse.log10();
    let mse: Vec<f64> = report.epochs.iter().map(|e| e.mse.unwrap()).collect();
    assert!(psnr(mse[5]) >= psnr(mse[0]) + 3.0, "{mse:?}");

    // Reconstruction of a training image against the untrained codec.
    let x = &scenes[0].image;
    let before = codec::init_codec_params(&CodecConfig::for_quality(1).unwrap(), cfg.seed).unwrap();
    let recon = |p: &ParameterSet| {
        let l = codec::encode_latents(p, x).unwrap();
        codec::decode_synthesis(p, &l.y_hat).unwrap()
    };
    let gain = machina::metrics::psnr(x, &recon(&params)).unwrap() - machina::metrics::psnr(x, &recon(&before)).unwrap();
    assert!(gain >= 3.0, "{gain}");
}

#[test]
fn task_pretraining_is_deterministic_and_converges() {
    let scenes = task::generate_dataset(96, 21).unwrap();
    let cfg = PretrainTaskConfig {
        epochs: 24,
        ..PretrainTaskConfig::default()
    };
    let (a, ra) = pretrain_task(&cfg, &scenes).unwrap();
    let (b, rb) = pretrain_task(&cfg, &scenes).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ra.digest, rb.digest);
    let loss: Vec<f64> = ra.epochs.iter().map(|e| e.loss).collect();
    let avg: Vec<f64> = loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg[..16].windows(2) {
        assert!(w[1] < w[0], "{loss:?}");
    }
}
