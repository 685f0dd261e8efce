use dcac::backbone::{FreezeScope, Param};
use dcac::datapipe::{toy_dataset, Manifest, MemorySource};
use dcac::evaluation::score_manifest;
use dcac::tensor::Tensor;
use dcac::training::{
    cosine_lr, steps_per_epoch, train_two_phase, AdamW, AdamWHyper, Checkpoint, TrainConfig, TrainData, Trainer,
};
use dcac::Error;

fn param(name: &str, values: Vec<f64>) -> Param {
    Param {
        name: name.into(),
        value: Tensor::new(&[values.len()], values).unwrap(),
        frozen: false,
    }
}

#[test]
fn zero_gradient_without_decay_is_identity() {
    let mut params = vec![param("a", vec![1.5, -2.0, 0.25]), param("b", vec![3.0])];
    let before = params.clone();
    let hyper = AdamWHyper {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(&params, hyper);
    let za = Tensor::zeros(&[3]);
    let zb = Tensor::zeros(&[1]);
    for _ in 0..10 {
        opt.update(&mut params, &[Some(&za), Some(&zb)], 0.1).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn decoupled_decay_scales_by_one_minus_lr_wd() {
    let mut params = vec![param("a", vec![2.0, -4.0])];
    let mut opt = AdamW::new(&params, AdamWHyper::default());
    let g = Tensor::zeros(&[2]);
    opt.update(&mut params, &[Some(&g)], 0.1).unwrap();
    let got = params[0].value.data();
    assert!((got[0] - 2.0 * 0.999).abs() < 1e-15);
    assert!((got[1] + 4.0 * 0.999).abs() < 1e-15);
}

#[test]
fn adamw_matches_hand_rolled_reference_on_quadratic() {
    // minimise p², gradient 2p
    let (b1, b2, eps, wd, lr) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.05);
    let mut params = vec![param("p", vec![1.0, -0.5])];
    let mut opt = AdamW::new(&params, AdamWHyper::default());
    let mut p = [1.0f64, -0.5];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for t in 1..=50 {
        let g = Tensor::new(&[2], params[0].value.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        opt.update(&mut params, &[Some(&g)], lr).unwrap();
        for i in 0..2 {
            let gi = 2.0 * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] = p[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
    }
    for i in 0..2 {
        assert!((params[0].value.data()[i] - p[i]).abs() < 1e-12);
    }
    assert!(p[0].abs() < 1.0 && p[1].abs() < 0.5);
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let mut params = vec![param("a", vec![1.0, 2.0]), param("b", vec![3.0])];
    let before = params.clone();
    let mut opt = AdamW::new(&params, AdamWHyper::default());
    let ga = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
    let gb = Tensor::new(&[1], vec![f64::NAN]).unwrap();
    let err = opt.update(&mut params, &[Some(&ga), Some(&gb)], 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref s) if s.contains('b')), "{err}");
    assert_eq!(params, before);
    assert_eq!(opt.step, 0);
}

#[test]
fn frozen_parameters_get_no_moments_and_stay_put() {
    let mut params = vec![param("a", vec![1.0]), param("b", vec![1.0])];
    params[0].frozen = true;
    let mut opt = AdamW::new(&params, AdamWHyper::default());
    assert!(opt.moments[0].is_none() && opt.moments[1].is_some());
    let g = Tensor::new(&[1], vec![1.0]).unwrap();
    opt.update(&mut params, &[Some(&g), Some(&g)], 0.1).unwrap();
    assert_eq!(params[0].value.data(), &[1.0]);
    assert_ne!(params[1].value.data(), &[1.0]);
}

#[test]
fn cosine_schedule_hits_analytic_values() {
    let total = 80;
    let (max, min) = (5e-5, 0.0);
    assert_eq!(cosine_lr(0, total, max, min), max);
    assert!((cosine_lr(40, total, max, min) - max / 2.0).abs() < 1e-20);
    assert!(cosine_lr(80, total, max, min).abs() < 1e-20);
    let mut prev = f64::INFINITY;
    for e in 0..total {
        let lr = cosine_lr(e, total, max, min);
        let want = min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * e as f64 / total as f64).cos());
        assert_eq!(lr, want);
        assert!(lr <= prev);
        prev = lr;
    }
    assert_eq!(steps_per_epoch(64, 8), 8);
    assert_eq!(steps_per_epoch(65, 8), 9);
}

fn toy_data() -> (Manifest, MemorySource) {
    toy_dataset(64, 32, 7).unwrap()
}

fn short_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy(seed);
    cfg.phase1.epochs = 2;
    cfg.phase2.epochs = 2;
    cfg
}

#[test]
fn toy_run_learns_and_logs_cosine_rates() {
    let (m, src) = toy_data();
    let data = TrainData {
        train: &m,
        val: Some(&m),
        source: &src,
    };
    let cfg = TrainConfig::toy(1);
    let (ckpt, log) = train_two_phase(cfg.clone(), &data, None).unwrap();
    assert_eq!(log.len(), 20);
    assert_eq!(ckpt.meta.cursor.unwrap().global_step, 160);
    for rec in &log {
        let p = cfg.phase(rec.summary.phase);
        assert_eq!(rec.summary.lr, cosine_lr(rec.summary.epoch, p.epochs, p.lr, cfg.lr_min));
    }
    let net = ckpt.to_network().unwrap();
    let auc = score_manifest(&net, &m, &src, 32, 16).unwrap().auroc().unwrap();
    assert!(auc >= 0.99, "training AUROC {auc}");
    let losses: Vec<f64> = log.iter().map(|r| r.summary.train_loss).collect();
    let blocks: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(blocks.windows(2).all(|w| w[1] <= w[0]), "5-epoch block means {blocks:?}");
}

#[test]
fn phase_one_leaves_backbone_and_blur_kernels_bit_identical() {
    let (m, src) = toy_data();
    let data = TrainData {
        train: &m,
        val: None,
        source: &src,
    };
    let cfg = short_cfg(3);
    let mut trainer = Trainer::new(cfg.clone(), &data).unwrap();
    let before = trainer.net.params().to_vec();
    let stats_before = trainer.net.norm_stats().to_vec();
    let kernels_before = trainer.net.aads_kernels().to_vec();
    trainer.run(&data, None, Some(cfg.phase1.epochs), |_| {}).unwrap();
    assert_eq!(trainer.cursor().phase, 2);
    let after = trainer.net.params();
    let mut head_moved = false;
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        if trainer.net.is_head(i) {
            head_moved |= a.value != b.value;
        } else {
            assert_eq!(a.value.data(), b.value.data(), "{} changed in phase 1", a.name);
        }
    }
    assert!(head_moved);
    assert_eq!(trainer.net.norm_stats(), &stats_before[..]);
    trainer.run(&data, None, None, |_| {}).unwrap();
    assert_eq!(trainer.net.aads_kernels(), &kernels_before[..]);
    assert!(trainer.net.params().iter().all(|p| !p.frozen));
}

#[test]
fn identical_seeds_give_identical_checkpoint_bytes() {
    let (m, src) = toy_data();
    let data = TrainData {
        train: &m,
        val: Some(&m),
        source: &src,
    };
    let a = train_two_phase(short_cfg(11), &data, None).unwrap().0.to_bytes().unwrap();
    let b = train_two_phase(short_cfg(11), &data, None).unwrap().0.to_bytes().unwrap();
    assert_eq!(a, b);
    let c = train_two_phase(short_cfg(12), &data, None).unwrap().0.to_bytes().unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trips_byte_identically_and_rejects_damage() {
    let (m, src) = toy_data();
    let data = TrainData {
        train: &m,
        val: None,
        source: &src,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(short_cfg(5), &data).unwrap();
    trainer.run(&data, Some(dir.path()), Some(3), |_| {}).unwrap();
    let p1 = dir.path().join("latest.dcac");
    let p2 = dir.path().join("again.dcac");
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(b1, b2);
    let log = std::fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["phase", "epoch", "lr", "train_loss", "val_auroc", "wall_ms"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    for cut in [0, 3, 20, b1.len() / 2, b1.len() - 1] {
        let err = Checkpoint::from_bytes(&b1[..cut], &p1).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    }
    let mut flipped = b1.clone();
    flipped[b1.len() / 3] ^= 0x10;
    let err = Checkpoint::from_bytes(&flipped, &p1).unwrap_err();
    assert!(err.to_string().contains("CRC"), "{err}");

    // a future version with a valid CRC is refused by version
    let mut future = b1[..b1.len() - 4].to_vec();
    future[4..8].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast_hash(&future);
    future.extend_from_slice(&crc.to_le_bytes());
    let err = Checkpoint::from_bytes(&future, &p1).unwrap_err();
    assert!(err.to_string().contains("version 2"), "{err}");
}

// bitwise CRC-32 (IEEE, reflected) so the test does not lean on the encoder's crate
fn crc32fast_hash(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn resume_mid_phase_two_matches_uninterrupted_run() {
    let (m, src) = toy_data();
    let data = TrainData {
        train: &m,
        val: Some(&m),
        source: &src,
    };
    let mut cfg = short_cfg(21);
    cfg.augment = Some(dcac::datapipe::AugmentConfig {
        output_size: 32,
        ..Default::default()
    });
    let full = train_two_phase(cfg.clone(), &data, None).unwrap().0;

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg, &data).unwrap();
    first.run(&data, Some(dir.path()), Some(3), |_| {}).unwrap();
    assert_eq!(first.cursor().phase, 2);
    assert_eq!(first.cursor().epoch, 1);
    drop(first);
    let ckpt = Checkpoint::load(&dir.path().join("latest.dcac")).unwrap();
    assert_eq!(ckpt.meta.frozen, FreezeScope::None);
    let mut resumed = Trainer::resume(&ckpt, &m.labels()).unwrap();
    resumed.run(&data, Some(dir.path()), None, |_| {}).unwrap();
    let fin = Checkpoint::load(&dir.path().join("final.dcac")).unwrap();
    assert_eq!(fin.arrays, full.arrays);
    assert_eq!(fin.to_bytes().unwrap(), full.to_bytes().unwrap());
}

#[test]
fn config_errors_name_the_field() {
    let mut cfg = TrainConfig::toy(0);
    cfg.batch_size = 1;
    assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
    let mut cfg = TrainConfig::toy(0);
    cfg.image_size = 16;
    assert!(cfg.validate().unwrap_err().to_string().contains("image_size"));
    let mut cfg = TrainConfig::toy(0);
    cfg.phase2.lr = -1.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("phase2.lr"));
    let text = serde_json::to_string(&TrainConfig::paper(3)).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, TrainConfig::paper(3));
    let bad = text.replacen("\"seed\"", "\"sed\"", 1);
    assert!(serde_json::from_str::<TrainConfig>(&bad).is_err());
}

#[test]
fn checkpoint_metadata_floats_survive_exactly() {
    let net = dcac::backbone::Network::new(dcac::backbone::NetworkConfig::tiny(), 0).unwrap();
    let mut ckpt = Checkpoint::from_network(&net);
    ckpt.meta.train = Some(TrainConfig::paper(1));
    ckpt.meta.log_tail = (0..80)
        .map(|e| dcac::training::EpochSummary {
            phase: 1,
            epoch: e,
            lr: cosine_lr(e, 80, 1e-2, 0.0),
            train_loss: 1.0 / (3.0 + e as f64),
            val_auroc: Some((e as f64).sqrt() / 9.0),
        })
        .collect();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back, ckpt);
}
