use pvxl_core::checkpoint::Checkpoint;
use pvxl_core::data::{
    binarize, parse_idx, synth_toy, Binarization, DataConfig, DataSource, Dataset, ToyKind, IDX_IMAGES, IDX_LABELS,
};
use pvxl_core::decoder::DecoderConfig;
use pvxl_core::encoder::EncoderConfig;
use pvxl_core::latent::LatentVars;
use pvxl_core::likelihood::Head;
use pvxl_core::model::{Model, ModelConfig, PriorKind};
use pvxl_core::optim::{Adam, AdamConfig};
use pvxl_core::params::ParamSet;
use pvxl_core::rbm::exact_log_z;
use pvxl_core::train::{
    evaluate, metrics_csv, model_checkpoint, model_from_checkpoint, train, AisLadder, PriorSamples, TrainConfig,
    METRICS_HEADER,
};
use pvxl_core::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn single(name: &str, values: Vec<f64>) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert(name, Tensor::new([values.len()], values).unwrap());
    ps
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = single("w", vec![0.5, -2.0, 3.0]);
    let before = p.clone();
    let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
    for _ in 0..5 {
        adam.step(&mut p, &single("w", vec![0.0; 3])).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_matches_hand_computed_updates() {
    let c = AdamConfig::default();
    let mut p = single("w", vec![1.0, -1.0]);
    let mut adam = Adam::new(c, &p).unwrap();
    let g1 = [0.2, -3.0];
    let g2 = [-0.1, 1.0];
    adam.step(&mut p, &single("w", g1.to_vec())).unwrap();
    adam.step(&mut p, &single("w", g2.to_vec())).unwrap();
    for i in 0..2 {
        let mut x = [1.0, -1.0][i];
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [g1[i], g2[i]].into_iter().enumerate() {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t as i32 + 1));
            let vh = v / (1.0 - c.beta2.powi(t as i32 + 1));
            x -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        assert!((p.require("w").unwrap().data()[i] - x).abs() < 1e-15);
    }
    // first step moves every coordinate by lr against the gradient sign
    let mut q = single("w", vec![0.0, 0.0]);
    let mut fresh = Adam::new(c, &q).unwrap();
    fresh.step(&mut q, &single("w", g1.to_vec())).unwrap();
    assert!((q.require("w").unwrap().data()[0] + c.lr).abs() < 1e-10);
    assert!((q.require("w").unwrap().data()[1] - c.lr).abs() < 1e-10);
}

#[test]
fn adam_learning_rate_decays_per_epoch() {
    let p = single("w", vec![0.0]);
    let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
    for _ in 0..100 {
        adam.end_epoch();
    }
    assert!((adam.lr() - 1e-3 * 0.999f64.powi(100)).abs() < 1e-18);
    assert!(Adam::new(AdamConfig { lr_decay: 1.5, ..Default::default() }, &p).is_err());
    assert!(Adam::new(AdamConfig { beta1: 1.0, ..Default::default() }, &p).is_err());
}

fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

#[test]
fn idx_fixture_parses_to_exact_bytes() {
    let pixels: Vec<u8> = (0..18).map(|i| (i * 14) as u8).collect();
    let mut bytes = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3];
    bytes.extend_from_slice(&pixels);
    let arr = parse_idx(&bytes).unwrap();
    assert_eq!(arr.dims, vec![2, 3, 3]);
    assert_eq!(arr.data, pixels);
    let d = Dataset::from_idx(&arr, None).unwrap();
    assert_eq!(d.images.shape(), &[2, 3, 3, 1]);
    assert_eq!(d.images.data()[17], 238.0 / 255.0);

    let mut wrong = bytes.clone();
    wrong[2] = 0x09;
    assert!(matches!(parse_idx(&wrong), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(parse_idx(&[]), Err(Error::Format { .. })));
}

#[test]
fn idx_files_load_into_splits() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let pixels: Vec<u8> = (0..5 * 6 * 6).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
    let train_images = write("train-images", idx_bytes(IDX_IMAGES, &[5, 6, 6], &pixels));
    let train_labels = write("train-labels", idx_bytes(IDX_LABELS, &[5], &[0, 1, 2, 3, 4]));
    let test_images = write("test-images", idx_bytes(IDX_IMAGES, &[2, 6, 6], &pixels[..72]));
    let config = DataConfig {
        source: DataSource::Idx {
            train_images: train_images.clone(),
            train_labels: Some(train_labels),
            test_images,
            test_labels: None,
            n_valid: 2,
        },
        binarization: Binarization::None,
        seed: 0,
    };
    let s = config.load().unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (3, 2, 2));
    assert_eq!(s.train.image_shape(), (6, 6, 1));
    assert_eq!(s.valid.labels.as_deref(), Some(&[3u8, 4][..]));
    assert_eq!(s.train.images.data()[0], 1.0);
    assert_eq!(s.train.images.data()[1], 0.0);
    assert!(s.train.is_binary());

    let bad = DataConfig {
        source: DataSource::Idx {
            train_images,
            train_labels: None,
            test_images: dir.path().join("missing"),
            test_labels: None,
            n_valid: 1,
        },
        ..config
    };
    assert!(matches!(bad.load(), Err(Error::Io { .. })));
    let truncated = idx_bytes(IDX_IMAGES, &[2, 6, 6], &pixels[..71]);
    assert!(matches!(parse_idx(&truncated), Err(Error::Format { .. })));
}

#[test]
fn binarization_follows_intensities() {
    let images = Tensor::from_fn([20_000, 1, 1, 1], |i| if i % 2 == 0 { 0.3 } else { 0.9 });
    let b = binarize(&images, &mut rng(4));
    let (mut even, mut odd) = (0.0, 0.0);
    for (i, v) in b.data().iter().enumerate() {
        assert!(*v == 0.0 || *v == 1.0);
        if i % 2 == 0 { even += v } else { odd += v }
    }
    assert!((even / 10_000.0 - 0.3).abs() < 0.015);
    assert!((odd / 10_000.0 - 0.9).abs() < 0.01);
    assert_eq!(b, binarize(&images, &mut rng(4)));
    // one pixel at 0.5 redrawn every epoch for 10⁴ epochs
    let half = Tensor::from_fn([1, 1, 1, 1], |_| 0.5);
    let mut r = rng(6);
    let ones: f64 = (0..10_000).map(|_| binarize(&half, &mut r).data()[0]).sum();
    assert!((ones / 10_000.0 - 0.5).abs() < 3.0 * 0.005);
    let zeros = Tensor::zeros([2, 3, 3, 1]);
    assert_eq!(binarize(&zeros, &mut r), zeros);
    let full = Tensor::from_fn([2, 3, 3, 1], |_| 1.0);
    assert_eq!(binarize(&full, &mut r), full);
    let binary = Tensor::from_fn([4, 2, 2, 1], |i| (i % 2) as f64);
    assert_eq!(binarize(&binary, &mut rng(5)), binary);
}

#[test]
fn synthetic_sets_are_binary_balanced_and_seeded() {
    for kind in [ToyKind::Bars, ToyKind::Rectangles, ToyKind::Sprites] {
        let d = synth_toy(400, 8, kind, &mut rng(1)).unwrap();
        assert!(d.is_binary());
        assert_eq!(d.image_shape(), (8, 8, 1));
        let labels = d.labels.as_ref().unwrap();
        let classes = *labels.iter().max().unwrap() as usize + 1;
        assert!(classes >= 2);
        for c in 0..classes {
            let share = labels.iter().filter(|&&l| l as usize == c).count() as f64 / 400.0;
            let p = 1.0 / classes as f64;
            let se = (p * (1.0 - p) / 400.0).sqrt();
            assert!((share - p).abs() < 3.0 * se, "{kind:?} class {c}: {share}");
        }
        assert_eq!(d, synth_toy(400, 8, kind, &mut rng(1)).unwrap());
        assert_ne!(d.fingerprint(), synth_toy(400, 8, kind, &mut rng(2)).unwrap().fingerprint());
    }
    assert!(synth_toy(3, 5, ToyKind::Bars, &mut rng(0)).is_err());
}

fn tiny_model(prior: PriorKind, z1: usize, z2: usize, z3_units: usize) -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            height: 6,
            width: 6,
            channels: 1,
            resnets: 1,
            filters: 4,
            no_strides: false,
            head: Head::Bernoulli,
            z1,
            z2,
            z3_units,
            z1_filters: 3,
            z1_map_channels: 2,
            z3_map_channels: 2,
        },
        encoder: EncoderConfig { filters: 4, stages: 1 },
        prior,
        rbm_init_std: 0.01,
    }
}

fn tiny_run(prior: PriorKind, seed: u64) -> TrainConfig {
    let (z1, z2) = if prior == PriorKind::None { (0, 0) } else { (4, 2) };
    TrainConfig {
        model: tiny_model(prior, z1, z2, 0),
        data: DataConfig {
            source: DataSource::Synthetic {
                kind: ToyKind::Bars,
                size: 6,
                n_train: 40,
                n_valid: 20,
                n_test: 20,
            },
            binarization: Binarization::Static,
            seed: 3,
        },
        batch_size: 10,
        epochs: 3,
        optimizer: AdamConfig { lr: 3e-3, ..Default::default() },
        kl_anneal_epochs: 2,
        ais: AisLadder {
            steps: 50,
            updates: 1,
            chains: 32,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let model = Model::new(tiny_model(PriorKind::Rbm, 4, 2, 0), &mut rng(0)).unwrap();
    let ckpt = Checkpoint {
        meta: serde_json::json!({ "note": "x", "n": 3 }),
        params: model.params.clone(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pvxl");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let mut corrupt = bytes.clone();
    let at = corrupt.len() - 10;
    corrupt[at] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checksum { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..12]), Err(Error::Format { .. })));
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let config = tiny_run(PriorKind::Rbm, 7);
    let splits = config.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&splits, &config, Some(dir.path())).unwrap();
    let b = train(&splits, &config, None).unwrap();
    assert_eq!(a.manifest.reproducible_metrics(), b.manifest.reproducible_metrics());
    assert_eq!(a.model.params, b.model.params);
    let c = train(&splits, &tiny_run(PriorKind::Rbm, 8), None).unwrap();
    assert_ne!(a.model.params, c.model.params);

    let rows = &a.manifest.metrics;
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r.elbo.is_finite() && r.kl.is_finite() && r.log_z_est.is_finite());
        assert!(r.valid_elbo.is_some());
        assert!(r.ess > 0.0);
    }
    // the KL weight reaches one after the anneal horizon
    assert!(rows[0].beta < 1.0);
    assert_eq!(rows[2].beta, 1.0);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(rows));
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 4);
    assert!(!csv.contains('\r'));
    let valid = std::fs::read_to_string(dir.path().join("validation.csv")).unwrap();
    assert_eq!(valid.lines().count(), 4);

    let ckpt = Checkpoint::load(&dir.path().join("final.pvxl")).unwrap();
    let (model, manifest) = model_from_checkpoint(&ckpt).unwrap();
    assert_eq!(model.params, a.model.params);
    assert_eq!(manifest.reproducible_metrics(), a.manifest.reproducible_metrics());
    assert_eq!(manifest.dataset_fingerprint, a.manifest.dataset_fingerprint);
    assert_eq!(model_checkpoint(&model, &manifest).unwrap().to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    let json: TrainConfig = serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
    assert_eq!(json, config);
}

#[test]
fn persistent_chain_gradients_train() {
    let config = TrainConfig {
        prior_samples: PriorSamples::Persistent {
            chains: 16,
            gibbs_steps: 2,
        },
        epochs: 2,
        ..tiny_run(PriorKind::Rbm, 1)
    };
    let splits = config.data.load().unwrap();
    let out = train(&splits, &config, None).unwrap();
    assert!(out.manifest.metrics.iter().all(|r| r.elbo.is_finite()));
}

#[test]
fn decoder_only_training_matches_a_standalone_loop() {
    let config = TrainConfig {
        valid_every: 0,
        ..tiny_run(PriorKind::None, 11)
    };
    let splits = config.data.load().unwrap();
    let out = train(&splits, &config, None).unwrap();

    let mut model_rng = rng(config.seed);
    model_rng.set_stream(0);
    let mut model = Model::new(config.model.clone(), &mut model_rng).unwrap();
    let mut r = rng(config.seed);
    r.set_stream(1);
    let mut adam = Adam::new(config.optimizer, &model.params).unwrap();
    let n = splits.train.len();
    for _ in 0..config.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut r);
        for batch in idx.chunks(config.batch_size) {
            let x = splits.train.gather(batch);
            let mut tape = Tape::<f64>::new();
            let bound = model.params.bind(&mut tape, true);
            let out = config
                .model
                .decoder
                .decode_teacher_forced(&mut tape, &bound, &x, &LatentVars::default())
                .unwrap();
            let ll = Head::Bernoulli.log_likelihood(&mut tape, out, &x).unwrap();
            let mean = tape.mean(ll);
            let loss = tape.neg(mean);
            let grads = model.params.gradients(&bound, &tape.backward(loss).unwrap());
            adam.step(&mut model.params, &grads).unwrap();
        }
        adam.end_epoch();
    }
    for (name, t) in out.model.params.iter() {
        let want = model.params.require(name).unwrap();
        let diff = t.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{name}: {diff}");
    }
    assert!(out.manifest.metrics.iter().all(|m| m.kl == 0.0 && m.elbo == m.recon));
}

#[test]
fn validation_bound_improves_on_a_toy_set() {
    let config = TrainConfig {
        epochs: 6,
        data: DataConfig {
            source: DataSource::Synthetic {
                kind: ToyKind::Bars,
                size: 6,
                n_train: 100,
                n_valid: 50,
                n_test: 10,
            },
            binarization: Binarization::Static,
            seed: 3,
        },
        optimizer: AdamConfig { lr: 1e-2, ..Default::default() },
        ..tiny_run(PriorKind::Rbm, 2)
    };
    let splits = config.data.load().unwrap();
    let out = train(&splits, &config, None).unwrap();
    let v: Vec<f64> = out.manifest.metrics.iter().map(|m| m.valid_elbo.unwrap()).collect();
    assert!(v[v.len() - 1] > v[0] + 1.0, "{v:?}");
    let t: Vec<f64> = out.manifest.metrics.iter().map(|m| m.elbo).collect();
    assert!(t[t.len() - 1] > t[0], "{t:?}");
}

#[test]
fn evaluation_uses_exact_log_z_for_small_priors() {
    let config = tiny_run(PriorKind::Rbm, 5);
    let splits = config.data.load().unwrap();
    let model = Model::new(config.model.clone(), &mut rng(9)).unwrap();
    let report = evaluate::<f64>(&model, &splits.test, 20, 10, &AisLadder::default(), &mut rng(1)).unwrap();
    assert!(report.log_z_exact);
    assert!((report.log_z - exact_log_z(&model.rbm().unwrap()).unwrap()).abs() < 1e-12);
    assert!((report.bpd + report.log_likelihood / (36.0 * std::f64::consts::LN_2)).abs() < 1e-12);
    assert!(report.log_likelihood < 0.0);
    assert_eq!(report.images, splits.test.len());
    let empty = Dataset::new(Tensor::zeros([0, 6, 6, 1]), None).unwrap();
    assert!(evaluate::<f64>(&model, &empty, 1, 1, &AisLadder::default(), &mut rng(1)).is_err());
}

#[test]
fn invalid_training_configs_are_rejected() {
    let base = tiny_run(PriorKind::Rbm, 0);
    let splits = base.data.load().unwrap();
    let zero_batch = TrainConfig { batch_size: 0, ..base.clone() };
    assert!(matches!(train(&splits, &zero_batch, None), Err(Error::Config(_))));
    let mut wrong = base.clone();
    wrong.model.decoder.height = 8;
    wrong.model.decoder.width = 8;
    assert!(matches!(train(&splits, &wrong, None), Err(Error::Config(_))));
    match TrainConfig::from_json(r#"{"epochs": 2, "bogus": 1}"#) {
        Err(Error::Config(msg)) => assert!(msg.contains("bogus"), "{msg}"),
        other => panic!("unknown key accepted: {other:?}"),
    }
    let defaults = TrainConfig::from_json("{}").unwrap();
    assert_eq!(defaults, TrainConfig::default());
    let text = serde_json::to_string(&base).unwrap();
    assert_eq!(serde_json::to_string(&TrainConfig::from_json(&text).unwrap()).unwrap(), text);
    let parsed = TrainConfig::from_json(r#"{"epochs": 2, "tau": {"kind": "constant", "tau": 0.5}}"#).unwrap();
    assert_eq!(parsed.epochs, 2);
    assert!(TrainConfig::from_json(r#"{"tau": {"kind": "constant", "tau": 5.0}}"#).is_err());
}

#[test]
fn bars_configuration_parses() {
    let text = r#"{
      "model": {
        "decoder": {"height": 14, "width": 14, "resnets": 2, "filters": 32, "z1": 16},
        "encoder": {"filters": 32, "stages": 2},
        "prior": "rbm"
      },
      "data": {"source": {"source": "synthetic", "kind": "bars", "size": 14,
                          "n_train": 300, "n_valid": 100, "n_test": 100}},
      "epochs": 50,
      "kl_anneal_epochs": 40,
      "tau": {"kind": "constant", "tau": 0.25},
      "precision": "f32",
      "seed": 0
    }"#;
    let c = TrainConfig::from_json(text).unwrap();
    assert_eq!((c.epochs, c.kl_anneal_epochs, c.precision), (50, 40, pvxl_core::Precision::F32));
    assert_eq!(c.model.prior, PriorKind::Rbm);
}
