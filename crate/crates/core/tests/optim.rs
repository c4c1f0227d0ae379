use indexmap::IndexMap;
use man_core::arch::*;
use man_core::data::*;
use man_core::optim::*;
use man_core::tensor::Tensor;
use man_core::Error;
use proptest::prelude::*;

fn single(name: &str, v: f64) -> IndexMap<String, Tensor<f64>> {
    IndexMap::from([(name.to_string(), Tensor::scalar(v))])
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut params = IndexMap::from([("w".to_string(), Tensor::<f32>::full([2, 3, 1, 1], 0.7))]);
    let grads = IndexMap::from([("w".to_string(), Tensor::<f32>::zeros([2, 3, 1, 1]))]);
    let mut state = AdamState::new();
    adam_step(params.iter_mut().map(|(k, v)| (k.as_str(), v)), &grads, &mut state, 0.1).unwrap();
    assert_eq!(params["w"], Tensor::full([2, 3, 1, 1], 0.7));
    assert_eq!(state.t, 1);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut params = single("p", 0.0);
    let mut state = AdamState::new();
    adam_step(params.iter_mut().map(|(k, v)| (k.as_str(), v)), &single("p", 1.0), &mut state, 0.1).unwrap();
    let want = -0.1 / (1.0 + 1e-8);
    assert!((params["p"].data()[0] - want).abs() < 1e-15);
}

/// Scalar Adam written out from the update equations.
fn reference_adam(p0: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.99f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    p
}

#[test]
fn two_steps_match_reference() {
    let mut params = single("p", 0.3);
    let mut state = AdamState::new();
    for _ in 0..2 {
        adam_step(params.iter_mut().map(|(k, v)| (k.as_str(), v)), &single("p", 0.25), &mut state, 0.01).unwrap();
    }
    assert!((params["p"].data()[0] - reference_adam(0.3, &[0.25, 0.25], 0.01)).abs() < 1e-12);
}

#[test]
fn missing_gradient_is_an_error() {
    let mut params = single("p", 0.0);
    let mut state = AdamState::new();
    let err = adam_step(params.iter_mut().map(|(k, v)| (k.as_str(), v)), &single("q", 1.0), &mut state, 0.1);
    assert!(matches!(err, Err(Error::MissingGrad(n)) if n == "p"));
    assert_eq!(state.t, 0);
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 1000, 5e-4, 1e-7).unwrap(), 5e-4);
    assert!((cosine_lr(1000, 1000, 5e-4, 1e-7).unwrap() - 1e-7).abs() < 1e-18);
    assert!((cosine_lr(500, 1000, 5e-4, 1e-7).unwrap() - (5e-4 + 1e-7) / 2.0).abs() < 1e-18);
    assert!(cosine_lr(1001, 1000, 5e-4, 1e-7).is_err());
    assert_eq!(TrainConfig::scratch().lr0, 5e-4);
}

#[test]
fn protocol_presets() {
    let s = TrainConfig::scratch();
    assert_eq!((s.lr0, s.total_iters, s.batch, s.patch), (5e-4, 160_000, 32, 48));
    let f = TrainConfig::finetune();
    assert_eq!((f.lr0, f.total_iters, f.batch, f.patch), (1e-4, 80_000, 16, 64));
    assert_eq!(TrainConfig::ablation().total_iters, 20_000);
    assert_eq!(s.grad_clip, None);
}

proptest! {
    #[test]
    fn zero_learning_rate_never_moves(p in -10.0f64..10.0, gs in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let mut params = single("p", p);
        let mut state = AdamState::new();
        for g in gs {
            adam_step(params.iter_mut().map(|(k, v)| (k.as_str(), v)), &single("p", g), &mut state, 0.0).unwrap();
        }
        prop_assert_eq!(params["p"].data()[0], p);
    }

    #[test]
    fn cosine_is_non_increasing(total in 1u64..5000, lr0 in 1e-6f64..1e-2) {
        let mut prev = f64::INFINITY;
        for t in 0..=total.min(400) {
            let lr = cosine_lr(t * total / total.min(400), total, lr0, 1e-7).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

fn tiny_config() -> ManConfig {
    ManConfig::custom(1, 12, 2)
}

#[test]
fn weights_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        tiny_config(),
        ManConfig::tiny(4),
        ManConfig { ffn: Ffn::Cff, ..ManConfig::custom(2, 6, 3) },
        ManConfig { block_style: BlockStyle::Rcan, tail: Tail::Conv3x3, ..ManConfig::custom(1, 6, 2) },
        ManConfig { attention: "lka_single:5-7-1".parse().unwrap(), ffn: Ffn::Sg, ..ManConfig::custom(1, 4, 4) },
        ManConfig { attention: "mlka_subset:3-5-1+7-9-1".parse().unwrap(), ffn: Ffn::Mlp, ..ManConfig::custom(1, 8, 2) },
    ] {
        let state = build_model(&cfg, 3).unwrap();
        let path = dir.path().join("w.manw");
        save_weights(&state, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded.config(), &cfg);
        for ((ka, va), (kb, vb)) in state.params().iter().zip(loaded.params()) {
            assert_eq!(ka, kb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(va), bits(vb));
        }
        assert_eq!(load_weights_for(&path, &cfg).unwrap(), state);
    }
}

#[test]
fn weight_file_layout() {
    let state = build_model(&tiny_config(), 0).unwrap();
    let bytes = encode_weights(&state);
    assert_eq!(&bytes[..4], b"MANW");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, state.params().len());
    let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    assert_eq!(&bytes[14..14 + name_len], b"head.weight");
    let mut p = 14 + name_len;
    assert_eq!(bytes[p], 4);
    p += 1;
    let dims: Vec<u32> = (0..4).map(|i| u32::from_le_bytes(bytes[p + 4 * i..p + 4 * i + 4].try_into().unwrap())).collect();
    assert_eq!(dims, [12, 3, 3, 3]);
    p += 16;
    assert_eq!(bytes[p], 0);
    let first = f32::from_le_bytes(bytes[p + 1..p + 5].try_into().unwrap());
    assert_eq!(first, state.get("head.weight").unwrap().data()[0]);
    let n = bytes.len();
    let crc = crc32fast::hash(&bytes[..n - 4]);
    assert_eq!(u32::from_le_bytes(bytes[n - 4..].try_into().unwrap()), crc);
}

#[test]
fn corrupt_files_are_rejected() {
    let state = build_model(&tiny_config(), 0).unwrap();
    let bytes = encode_weights(&state);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_weights(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(decode_weights(&bad).unwrap_err().to_string().contains("version"));
    assert!(decode_weights(&bytes[..bytes.len() / 2]).unwrap_err().to_string().contains("truncated"));
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(decode_weights(&bad).unwrap_err().to_string().contains("CRC"));
}

#[test]
fn loading_into_wrong_config_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.manw");
    save_weights(&build_model(&tiny_config(), 0).unwrap(), &path).unwrap();
    let err = load_weights_for(&path, &ManConfig::custom(1, 12, 4)).unwrap_err().to_string();
    assert!(err.contains("recon.weight"), "{err}");
    let err = load_weights_for(&path, &ManConfig::custom(1, 6, 2)).unwrap_err().to_string();
    assert!(err.contains("head.weight"), "{err}");
    let err = load_weights_for(&path, &ManConfig::custom(2, 12, 2)).unwrap_err().to_string();
    assert!(err.contains("blocks.1"), "{err}");
}

fn smooth_data(scale: usize) -> DatasetIndex {
    let images = (0..2).map(|i| (format!("img{i}"), synth::scene(32, 32, i))).collect();
    DatasetIndex::from_hr_images(images, scale).unwrap()
}

fn short_run(iters: u64) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch: 2,
        patch: 8,
        lr0: 1e-3,
        seed: 11,
        ..TrainConfig::scratch()
    }
}

#[test]
fn zero_iterations_leave_model_untouched() {
    let model = build_model(&tiny_config(), 0).unwrap();
    let (out, log) = train(model.clone(), &smooth_data(2), &short_run(0)).unwrap();
    assert_eq!(out, model);
    assert!(log.entries.is_empty());
}

#[test]
fn training_is_seed_deterministic() {
    man_core::parallel::set_enabled(false);
    let data = smooth_data(2);
    let model = build_model(&tiny_config(), 0).unwrap();
    let (a, la) = train(model.clone(), &data, &short_run(6)).unwrap();
    let (b, lb) = train(model.clone(), &data, &short_run(6)).unwrap();
    man_core::parallel::set_enabled(true);
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert_eq!(la.entries.len(), 6);
    assert_ne!(a, model);
    let (_, lc) = train(model, &data, &TrainConfig { seed: 12, ..short_run(6) }).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    man_core::parallel::set_enabled(false);
    let data = smooth_data(2);
    let model = build_model(&tiny_config(), 1).unwrap();
    let cfg = short_run(10);
    let (full, full_log) = train(model.clone(), &data, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.manc");
    let mut first = Trainer::new(model, cfg.clone()).unwrap();
    let log1 = first.run_until(&data, 5, |_, _| Ok(())).unwrap();
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let ckpt = load_checkpoint(&path, &tiny_config()).unwrap();
    assert_eq!(ckpt, first.checkpoint());
    let mut second = Trainer::resume(ckpt, cfg).unwrap();
    let log2 = second.run_until(&data, 10, |_, _| Ok(())).unwrap();
    man_core::parallel::set_enabled(true);
    assert_eq!(second.state, full);
    let joined: Vec<_> = log1.entries.iter().chain(&log2.entries).copied().collect();
    assert_eq!(joined, full_log.entries);
}

#[test]
fn checkpoint_rejects_plain_weights_and_corruption() {
    let cfg = tiny_config();
    let state = build_model(&cfg, 0).unwrap();
    assert!(Checkpoint::decode(&encode_weights(&state), &cfg).is_err());
    let trainer = Trainer::new(state, short_run(3)).unwrap();
    let mut bytes = trainer.checkpoint().encode();
    let n = bytes.len();
    bytes[n - 10] ^= 1;
    assert!(Checkpoint::decode(&bytes, &cfg).unwrap_err().to_string().contains("CRC"));
}

#[test]
fn training_reports_data_problems() {
    let model = build_model(&tiny_config(), 0).unwrap();
    let err = train(model.clone(), &smooth_data(2), &TrainConfig { patch: 40, ..short_run(2) }).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let err = train(model, &smooth_data(3), &short_run(2)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn divergence_is_a_numeric_error() {
    let mut model = build_model(&tiny_config(), 0).unwrap();
    model.get_mut("head.weight").unwrap().data_mut()[0] = f32::INFINITY;
    let err = train(model, &smooth_data(2), &short_run(2)).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn loss_log_csv_and_smoothing() {
    let log = LossLog {
        entries: (1..=6).map(|i| StepInfo { iter: i, loss: i as f32, lr: 0.5 }).collect(),
    };
    assert_eq!(log.smoothed(2), vec![1.5, 3.5, 5.5]);
    assert_eq!(log.smoothed(4), vec![2.5]);
    let csv = log.to_csv();
    assert!(csv.starts_with("iter,loss,lr\n1,"));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(LossLog::from_csv(&csv).unwrap(), log);

    let odd = LossLog {
        entries: vec![StepInfo { iter: 3, loss: 0.123_456_79, lr: 4.999_999_3e-4 }],
    };
    assert_eq!(LossLog::from_csv(&odd.to_csv()).unwrap(), odd);
    assert!(LossLog::from_csv("iter,loss\n").is_err());
    assert!(LossLog::from_csv("iter,loss,lr\n1,x,0.1\n").is_err());
}
