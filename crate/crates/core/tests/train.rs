mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use scattnet::attention::HiddenActivation;
use scattnet::data::{synth_dataset, Sample, SynthSpec};
use scattnet::model::{AttentionMode, Model, ModelConfig, ParamStore};
use scattnet::train::{adam_step, train, AdamState, TrainConfig, TrainOptions, HISTORY_HEADER};
use scattnet::{Error, Tape, Tensor};

/// Mean of −log softmax(x)[t] over non-ignored pixels, straight from the
/// definition in f64.
fn ce_oracle(logits: &Tensor, targets: &[u8], ignore: Option<u8>) -> f64 {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let (mut total, mut count) = (0.0, 0);
    for b in 0..n {
        for p in 0..hw {
            let t = targets[b * hw + p];
            if Some(t) == ignore {
                continue;
            }
            let at = |c: usize| x[(b * k + c) * hw + p] as f64;
            let z: f64 = (0..k).map(|c| at(c).exp()).sum();
            total += -(at(t as usize).exp() / z).ln();
            count += 1;
        }
    }
    total / count as f64
}

fn ce(logits: &Tensor, targets: &[u8], ignore: Option<u8>) -> scattnet::Result<f32> {
    let mut t = Tape::new();
    let x = t.constant(logits.clone());
    let l = t.cross_entropy(x, targets, ignore)?;
    t.value(l).item()
}

fn random_targets(len: usize, k: u8, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(0..k)).collect()
}

#[test]
fn uniform_logits_give_ln_k() {
    for k in [2usize, 3, 6] {
        let logits = Tensor::full([2, k, 3, 3], 0.7);
        let targets = random_targets(18, k as u8, k as u64);
        let l = ce(&logits, &targets, None).unwrap();
        assert!((l as f64 - (k as f64).ln()).abs() < 1e-6, "k={k}: {l}");
    }
}

#[test]
fn huge_correct_margin_drives_loss_to_zero() {
    let targets = random_targets(16, 3, 1);
    let logits = Tensor::from_fn([1, 3, 4, 4], |i| {
        if targets[i % 16] as usize == i / 16 {
            200.0
        } else {
            -200.0
        }
    });
    assert_eq!(ce(&logits, &targets, None).unwrap(), 0.0);
}

#[test]
fn random_batch_matches_pixel_loop_oracle() {
    for seed in SEEDS {
        let logits = uniform(&[2, 3, 4, 4], seed);
        let targets = random_targets(32, 3, seed + 100);
        let l = ce(&logits, &targets, None).unwrap() as f64;
        let o = ce_oracle(&logits, &targets, None);
        assert!((l - o).abs() < 1e-5, "seed {seed}: {l} vs {o}");
    }
}

#[test]
fn ignored_pixels_drop_out_of_the_mean() {
    let logits = uniform(&[2, 3, 4, 4], 9);
    let targets = random_targets(32, 3, 10);
    let l = ce(&logits, &targets, Some(2)).unwrap() as f64;
    assert!((l - ce_oracle(&logits, &targets, Some(2))).abs() < 1e-5);
    // The ignored label may lie outside the class range.
    let mut t = targets.clone();
    t[0] = 9;
    let l = ce(&logits, &t, Some(9)).unwrap() as f64;
    assert!((l - ce_oracle(&logits, &t, Some(9))).abs() < 1e-5);
}

#[test]
fn all_ignored_pixels_are_an_error() {
    let logits = uniform(&[1, 2, 2, 2], 1);
    assert!(matches!(
        ce(&logits, &[1; 4], Some(1)),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn target_outside_class_range_is_an_error() {
    let logits = uniform(&[1, 2, 2, 2], 1);
    assert!(ce(&logits, &[0, 1, 2, 0], None).is_err());
}

#[test]
fn gradient_matches_softmax_minus_onehot_over_pixel_count() {
    for seed in SEEDS {
        for ignore in [None, Some(1u8)] {
            let logits = uniform(&[2, 4, 3, 3], seed);
            let targets = random_targets(18, 4, seed + 7);
            let mut t = Tape::new();
            let x = t.variable(logits.clone());
            let l = t.cross_entropy(x, &targets, ignore).unwrap();
            let g = t.backward(l).unwrap().get(x).unwrap().clone();

            let (k, hw) = (4, 9);
            let count = targets.iter().filter(|&&t| Some(t) != ignore).count() as f64;
            let d = logits.data();
            for b in 0..2 {
                for p in 0..hw {
                    let tgt = targets[b * hw + p];
                    let z: f64 = (0..k).map(|c| (d[(b * k + c) * hw + p] as f64).exp()).sum();
                    for c in 0..k {
                        let i = (b * k + c) * hw + p;
                        let want = if Some(tgt) == ignore {
                            0.0
                        } else {
                            let prob = (d[i] as f64).exp() / z;
                            (prob - (c == tgt as usize) as u8 as f64) / count
                        };
                        assert!(
                            (g.data()[i] as f64 - want).abs() < 1e-4,
                            "seed {seed}, coordinate {i}: {} vs {want}",
                            g.data()[i]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn gradient_passes_finite_differences() {
    for seed in SEEDS {
        let targets = random_targets(32, 3, seed);
        let r = scattnet::gradcheck::finite_diff_check(
            |t, x| t.cross_entropy(x, &targets, None),
            &uniform(&[2, 3, 4, 4], seed),
            1e-2,
        )
        .unwrap();
        assert_grad(&r, &format!("cross_entropy, seed {seed}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_channel_shift_leaves_loss_unchanged(seed in any::<u64>(), c in -50f32..50.0) {
        let logits = uniform(&[2, 3, 2, 3], seed);
        let targets = random_targets(12, 3, seed ^ 1);
        let shifted = logits.map(|v| v + c);
        let a = ce(&logits, &targets, None).unwrap();
        let b = ce(&shifted, &targets, None).unwrap();
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }
}

fn scalar_params(w: f32) -> ParamStore {
    ParamStore::from([("w".to_string(), Tensor::scalar(w))])
}

fn scalar_grad(g: f32) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = ParamStore::from([("a".to_string(), uniform(&[3, 2], 1))]);
    let before = p.clone();
    let mut st = AdamState::default();
    let grads = BTreeMap::from([("a".to_string(), Tensor::zeros([3, 2]))]);
    adam_step(&mut p, &grads, &mut st, &TrainConfig::default()).unwrap();
    assert_eq!(p, before);
    assert!(st.m["a"].data().iter().all(|&v| v == 0.0));
    assert_eq!(st.t, 1);
}

#[test]
fn zero_gradient_decays_the_moments() {
    let cfg = TrainConfig::default();
    let mut p = scalar_params(1.0);
    let mut st = AdamState {
        m: BTreeMap::from([("w".to_string(), Tensor::scalar(0.5))]),
        v: BTreeMap::from([("w".to_string(), Tensor::scalar(0.25))]),
        t: 3,
    };
    adam_step(&mut p, &scalar_grad(0.0), &mut st, &cfg).unwrap();
    assert!((st.m["w"].item().unwrap() - 0.5 * 0.9).abs() < 1e-7);
    assert!((st.v["w"].item().unwrap() - 0.25 * 0.999).abs() < 1e-7);
    assert_eq!(st.t, 4);
}

#[test]
fn first_step_is_minus_lr_times_gradient_sign() {
    let cfg = TrainConfig {
        lr: 0.05,
        ..Default::default()
    };
    for g in [4.0f32, -0.3, 1e-3] {
        let mut p = scalar_params(2.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &scalar_grad(g), &mut st, &cfg).unwrap();
        let moved = p["w"].item().unwrap() - 2.0;
        assert!((moved + 0.05 * g.signum()).abs() < 1e-5, "g={g}: {moved}");
    }
}

#[test]
fn step_counter_strictly_increases() {
    let mut p = scalar_params(0.0);
    let mut st = AdamState::default();
    for expected in 1..=5 {
        adam_step(&mut p, &scalar_grad(1.0), &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(st.t, expected);
    }
}

#[test]
fn hundred_steps_on_a_quadratic_track_a_scalar_reference() {
    let cfg = TrainConfig {
        lr: 0.1,
        ..Default::default()
    };
    let mut p = scalar_params(0.0);
    let mut st = AdamState::default();
    // Reference Adam, f64 throughout.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * (p["w"].item().unwrap() - 3.0);
        adam_step(&mut p, &scalar_grad(g), &mut st, &cfg).unwrap();

        let g = 2.0 * (w - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    let got = p["w"].item().unwrap() as f64;
    assert!((w - 3.0).abs() < 0.5, "reference ended at {w}");
    assert!((got - 3.0).abs() < 0.5, "ended at {got}");
    assert!((got - w).abs() < 1e-3, "{got} vs reference {w}");
}

#[test]
fn shape_mismatch_and_unknown_names_are_contract_violations() {
    let mut p = scalar_params(0.0);
    let mut st = AdamState::default();
    let bad = BTreeMap::from([("w".to_string(), Tensor::zeros([2]))]);
    assert!(matches!(
        adam_step(&mut p, &bad, &mut st, &TrainConfig::default()),
        Err(Error::Contract { .. })
    ));
    let unknown = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
    assert!(adam_step(&mut p, &unknown, &mut st, &TrainConfig::default()).is_err());
    assert_eq!(st.t, 0);
}

#[test]
fn non_finite_gradient_rejects_the_step() {
    let mut p = ParamStore::from([
        ("a".to_string(), Tensor::scalar(1.0)),
        ("b".to_string(), Tensor::scalar(2.0)),
    ]);
    let before = p.clone();
    let mut st = AdamState::default();
    let grads = BTreeMap::from([
        ("a".to_string(), Tensor::scalar(1.0)),
        ("b".to_string(), Tensor::scalar(f32::INFINITY)),
    ]);
    match adam_step(&mut p, &grads, &mut st, &TrainConfig::default()) {
        Err(Error::NonFinite { op }) => assert!(op.contains('b'), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(st, AdamState::default());
}

fn tiny_model(seed: u64) -> Model {
    Model::build(ModelConfig {
        in_channels: 3,
        num_classes: 3,
        encoder_widths: vec![8],
        attention: AttentionMode::Cascade,
        hidden_activation: HiddenActivation::Relu,
        seed,
    })
    .unwrap()
}

fn tiny_data(seed: u64) -> Vec<Sample> {
    synth_dataset(
        &SynthSpec {
            num_tiles: 12,
            tile_size: 16,
            num_classes: 3,
            shape_density: 0.5,
        },
        seed,
    )
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs: 4,
        seed,
        max_shift: 2,
        record_wall_time: false,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let model = tiny_model(1);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        ..tiny_config(1)
    };
    let (trained, history) =
        train(model.clone(), &tiny_data(1), &cfg, &Default::default()).unwrap();
    assert_eq!(trained.checkpoint_bytes(), model.checkpoint_bytes());
    assert_eq!(history.epochs.len(), 2);
}

#[test]
fn same_seed_gives_identical_loss_curves_and_weights() {
    let data = tiny_data(2);
    let cfg = tiny_config(5);
    let (a, ha) = train(tiny_model(2), &data, &cfg, &Default::default()).unwrap();
    let (b, hb) = train(tiny_model(2), &data, &cfg, &Default::default()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
    let (_, hc) = train(tiny_model(2), &data, &tiny_config(6), &Default::default()).unwrap();
    assert_ne!(ha.losses(), hc.losses());
}

#[test]
fn epoch_loss_decreases_for_every_seed() {
    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig {
            epochs: 6,
            ..tiny_config(seed)
        };
        let (_, h) = train(
            tiny_model(seed),
            &tiny_data(seed),
            &cfg,
            &Default::default(),
        )
        .unwrap();
        let l = h.losses();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(
            l[l.len() - 1] < l[0],
            "seed {seed}: first {} last {}",
            l[0],
            l[l.len() - 1]
        );
    }
}

#[test]
fn checkpoint_is_written_up_front_and_after_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sckp");
    let data = tiny_data(3);
    let opts = TrainOptions {
        checkpoint: Some(path.clone()),
        eval_set: Some(&data[..4]),
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config(3)
    };
    let model = tiny_model(3);
    let (_, h) = train(model.clone(), &data, &cfg, &opts).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(h.to_csv(), format!("{HISTORY_HEADER}\n"));
    assert_eq!(
        std::fs::read(&path).unwrap(),
        model.checkpoint_bytes(),
        "epochs=0 leaves exactly the initial checkpoint"
    );

    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_config(3)
    };
    let (trained, h) = train(model, &data, &cfg, &opts).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), trained.checkpoint_bytes());
    for e in &h.epochs {
        let s = e.eval.expect("eval set was given");
        for v in [s.oa, s.miou, s.af] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(e.seconds.is_none());
    }
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sckp");
    let opts = TrainOptions {
        checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: 1e30,
        epochs: 5,
        augment: false,
        ..tiny_config(4)
    };
    let err = train(tiny_model(4), &tiny_data(4), &cfg, &opts).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
    let kept = Model::load_checkpoint(&path).unwrap();
    assert!(kept.params().values().all(Tensor::all_finite));
}

#[test]
fn patch_sizes_must_suit_the_downsample_factor() {
    let model = Model::build(ModelConfig {
        encoder_widths: vec![8, 16, 16],
        num_classes: 3,
        ..tiny_model(1).config().clone()
    })
    .unwrap();
    let cfg = TrainConfig {
        crop_size: Some(10),
        ..tiny_config(1)
    };
    assert!(matches!(
        train(model, &tiny_data(1), &cfg, &Default::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(matches!(
        train(tiny_model(1), &[], &tiny_config(1), &Default::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn config_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cfg");
    std::fs::write(
        &path,
        "# comment\nlr=0.0001\nbatch_size=4\nepochs=3\nignore_class=5\ncrop_size=none\n",
    )
    .unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.lr, 1e-4);
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.ignore_class, Some(5));
    assert_eq!(cfg.crop_size, None);
    assert_eq!((cfg.beta1, cfg.beta2, cfg.eps), (0.9, 0.999, 1e-8));

    for bad in ["lr=-1", "batch_size=0", "beta2=1.5", "unknown_key=1", "lr"] {
        assert!(TrainConfig::from_text(bad).is_err(), "{bad}");
    }
}
