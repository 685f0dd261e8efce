use dcac::datapipe::*;
use dcac::tensor::Tensor;
use dcac::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn record(name: &str, patient: &str, target: u8) -> SampleRecord {
    SampleRecord {
        image_name: name.into(),
        patient_id: patient.into(),
        sex: None,
        age_approx: None,
        anatom_site: None,
        diagnosis: None,
        benign_malignant: None,
        target,
    }
}

/// `patients` patients with 1..=max_images images each; roughly `mal_rate`
/// of images malignant, at least one of each class.
fn synthetic(seed: u64, patients: usize, max_images: usize, mal_rate: f64) -> Manifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for p in 0..patients {
        for _ in 0..rng.random_range(1..=max_images) {
            let t = u8::from(rng.random::<f64>() < mal_rate);
            records.push(record(&format!("ISIC_{:07}", records.len()), &format!("IP_{p:05}"), t));
        }
    }
    records[0].target = 1;
    let last = records.len() - 1;
    records[last].target = 0;
    Manifest::new(records).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.random::<f64>())
}

const CSV: &str = "\
image_name,patient_id,sex,age_approx,anatom_site_general_challenge,diagnosis,benign_malignant,target
ISIC_2637011,IP_7279968,male,45.0,head/neck,unknown,benign,0
ISIC_0015719,IP_3075186,female,45.0,upper extremity,unknown,benign,0
ISIC_0052212,IP_2842074,,,,nevus,malignant,1
";

#[test]
fn three_row_manifest_round_trips() {
    let m = Manifest::from_reader(CSV.as_bytes()).unwrap();
    assert_eq!(m.len(), 3);
    let r = &m.records()[0];
    assert_eq!(r.image_name, "ISIC_2637011");
    assert_eq!(r.sex, Some(Sex::Male));
    assert_eq!(r.age_approx, Some(45.0));
    assert_eq!(r.anatom_site.as_deref(), Some("head/neck"));
    let r = &m.records()[2];
    assert_eq!((r.sex, r.age_approx, r.anatom_site.as_deref()), (None, None, None));
    assert_eq!(r.diagnosis.as_deref(), Some("nevus"));
    assert_eq!(r.target, 1);

    let mut buf = Vec::new();
    m.to_writer(&mut buf).unwrap();
    assert_eq!(Manifest::from_reader(buf.as_slice()).unwrap(), m);
}

#[test]
fn manifest_errors_are_structured() {
    let header_only = "image_name,patient_id,target\n";
    assert!(Manifest::from_reader(header_only.as_bytes()).unwrap().is_empty());

    match Manifest::from_reader("image_name,patient_id\na,b\n".as_bytes()) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "target"),
        other => panic!("{other:?}"),
    }
    match Manifest::from_reader("image_name,patient_id,target\na,p,0\nb,p,2\n".as_bytes()) {
        Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 3),
        other => panic!("{other:?}"),
    }
    assert!(Manifest::from_reader("image_name,patient_id,target\na,p,0\na,q,1\n".as_bytes()).is_err());
}

#[test]
fn dedup_reproduces_isic_count_arithmetic() {
    // 33,126 images with 584 malignant; 425 listed duplicates of which 3 are
    // malignant leave 32,701 and 581
    let mut records = Vec::new();
    for i in 0..33_126 {
        records.push(record(&format!("ISIC_{i:07}"), &format!("IP_{:05}", i / 16), u8::from(i % 56 == 0 && i / 56 < 584)));
    }
    let m = Manifest::new(records).unwrap();
    assert_eq!((m.len(), m.malignant_count()), (33_126, 584));
    let malignant: Vec<_> = m.records().iter().filter(|r| r.target == 1).map(|r| r.image_name.clone()).collect();
    let benign: Vec<_> = m.records().iter().filter(|r| r.target == 0).map(|r| r.image_name.clone()).collect();
    let mut dups: Vec<String> = malignant[..3].to_vec();
    dups.extend(benign[..422].iter().cloned());
    dups.push("ISIC_not_present".into());
    let (d, report) = m.remove_duplicates(&dups);
    assert_eq!((d.len(), d.malignant_count(), d.benign_count()), (32_701, 581, 32_120));
    assert_eq!(report.removed, 425);
    assert_eq!(report.absent, vec!["ISIC_not_present".to_string()]);
}

#[test]
fn dedup_edge_cases() {
    let m = synthetic(1, 20, 4, 0.2);
    let none: [&str; 0] = [];
    assert_eq!(m.remove_duplicates(&none).0, m);
    let all: Vec<&str> = m.records().iter().map(|r| r.image_name.as_str()).collect();
    assert!(m.remove_duplicates(&all).0.is_empty());
    assert_eq!(parse_id_list("image_name_1,image_name_2\nA,B\n\nC,D\n"), vec!["B", "D"]);
    assert_eq!(parse_id_list("X\nY\n"), vec!["X", "Y"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn dedup_length_law(seed in 0u64..1000, picks in proptest::collection::vec(0usize..200, 0..40)) {
        let m = synthetic(seed, 30, 4, 0.1);
        let mut ids: Vec<String> = picks.iter().map(|&i| format!("ISIC_{i:07}")).collect();
        ids.push("missing".into());
        let present: HashSet<&String> = ids.iter().filter(|id| m.records().iter().any(|r| &r.image_name == *id)).collect();
        let (d, _) = m.remove_duplicates(&ids);
        prop_assert_eq!(d.len(), m.len() - present.len());
    }
}

fn check_disjoint(m: &Manifest, s: &Split) {
    let train_patients: HashSet<_> = s.train.patients().keys().collect();
    assert!(s.val.patients().keys().all(|p| !train_patients.contains(p)), "patient on both sides");
    let mut union: Vec<_> = s.train.records().iter().chain(s.val.records()).map(|r| r.image_name.clone()).collect();
    union.sort();
    let mut all: Vec<_> = m.records().iter().map(|r| r.image_name.clone()).collect();
    all.sort();
    assert_eq!(union, all);
}

#[test]
fn split_is_patient_disjoint_on_random_manifests() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = synthetic(seed, rng.random_range(2..80), rng.random_range(1..8), rng.random_range(0.01..0.5));
        let s = patient_split(&m, rng.random_range(0.05..0.95), seed).unwrap();
        check_disjoint(&m, &s);
        assert!(!s.train.is_empty() && !s.val.is_empty());
    }
}

#[test]
fn split_hits_image_and_malignant_targets() {
    let m = synthetic(7, 2_000, 30, 0.018);
    for seed in 0..5 {
        let s = patient_split(&m, 0.3, seed).unwrap();
        let frac = s.val.len() as f64 / m.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "image fraction {frac}");
        let mal = s.val.malignant_count() as f64 / (0.3 * m.malignant_count() as f64);
        assert!((mal - 1.0).abs() <= 0.15, "malignant ratio {mal}");
        assert_eq!(s.summary.val.images + s.summary.train.images, m.len());
    }
}

#[test]
fn split_small_cases() {
    let two = Manifest::new(vec![record("a", "p1", 1), record("b", "p2", 0)]).unwrap();
    let s = patient_split(&two, 0.5, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len()), (1, 1));

    let one = Manifest::new(vec![record("a", "p1", 1), record("b", "p1", 0)]).unwrap();
    assert!(matches!(patient_split(&one, 0.5, 3), Err(Error::Data(_))));
    assert!(patient_split(&two, 1.0, 3).is_err());
    assert!(patient_split(&two, 0.0, 3).is_err());
}

#[test]
fn split_files_are_reproducible() {
    let m = synthetic(3, 100, 5, 0.1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    patient_split(&m, 0.3, 11).unwrap().write(a.path()).unwrap();
    patient_split(&m, 0.3, 11).unwrap().write(b.path()).unwrap();
    for f in ["train.csv", "val.csv", "split_summary.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let back = Manifest::load(&a.path().join("val.csv")).unwrap();
    assert_eq!(back, patient_split(&m, 0.3, 11).unwrap().val);
}

fn malignant_fraction(labels: &[u8], seed: u64, draws: usize) -> f64 {
    let mut s = BalancedSampler::new(labels, seed).unwrap();
    (0..draws).filter(|_| labels[s.next_index()] == 1).count() as f64 / draws as f64
}

#[test]
fn sampler_balances_classes() {
    let mut labels = vec![0u8; 9];
    labels.push(1);
    let f = malignant_fraction(&labels, 0, 100_000);
    assert!((0.48..=0.52).contains(&f), "{f}");

    for ratio in [1usize, 10, 100, 1000] {
        let mut labels = vec![0u8; ratio * 3];
        labels.extend([1, 1, 1]);
        let f = malignant_fraction(&labels, ratio as u64, 100_000);
        assert!((f - 0.5).abs() <= 0.02, "ratio {ratio}: {f}");
    }
}

#[test]
fn sampler_is_uniform_on_balanced_data() {
    let labels = [0u8, 1, 0, 1, 0, 1, 0, 1, 0, 1];
    let mut s = BalancedSampler::new(&labels, 5).unwrap();
    let mut counts = [0f64; 10];
    let draws = 100_000;
    for _ in 0..draws {
        counts[s.next_index()] += 1.0;
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // chi-square critical value, 9 degrees of freedom, alpha 0.001
    assert!(chi2 < 27.877, "{chi2}");
}

#[test]
fn sampler_replays_and_resumes() {
    let labels = [0u8, 0, 0, 1, 0, 1];
    let a = BalancedSampler::new(&labels, 9).unwrap().draw(1000);
    let b = BalancedSampler::new(&labels, 9).unwrap().draw(1000);
    assert_eq!(a, b);

    let mut s = BalancedSampler::new(&labels, 9).unwrap();
    s.draw(357);
    let state = s.state();
    let rest = s.draw(100);
    let mut r = BalancedSampler::new(&labels, 0).unwrap();
    r.restore(state);
    assert_eq!(r.draw(100), rest);
    assert_eq!(&a[357..457], rest.as_slice());

    assert!(BalancedSampler::new(&[0, 0, 0], 1).is_err());
}

#[test]
fn resize_matches_hand_computed_half_pixel_values() {
    // each channel is [[0, 1], [0, 1]]
    let img = Tensor::from_fn(&[3, 2, 2], |i| (i % 2) as f64);
    let out = resize_bilinear(&img, 4, 4).unwrap();
    for row in 0..4 {
        assert_eq!(&out.data()[row * 4..row * 4 + 4], &[0.0, 0.25, 0.75, 1.0]);
    }
    let same = random_image(5, 7, 1);
    assert_eq!(resize_bilinear(&same, 5, 7).unwrap(), same);
}

#[test]
fn identity_augmentation_is_a_resize() {
    let img = random_image(48, 40, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = augment(&img, &AugmentConfig::identity(160), &mut rng).unwrap();
    assert_eq!(out, resize_bilinear(&img, 160, 160).unwrap());
}

#[test]
fn full_hue_turn_is_identity() {
    let img = random_image(16, 16, 3);
    let out = adjust_hue(&img, 1.0);
    let worst = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
    let half = adjust_hue(&Tensor::from_fn(&[3, 1, 1], |c| [1.0, 0.0, 0.0][c]), 0.5);
    assert!(half.data().iter().zip([0.0, 1.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-12), "{:?}", half.data());
}

#[test]
fn augmentation_replays_per_substream() {
    let img = random_image(64, 64, 4);
    let cfg = AugmentConfig::default();
    let a = augment(&img, &cfg, &mut substream(7, &[1, 2, 3])).unwrap();
    let b = augment(&img, &cfg, &mut substream(7, &[1, 2, 3])).unwrap();
    let c = augment(&img, &cfg, &mut substream(7, &[1, 3, 2])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn augmentation_rejects_out_of_range_pixels() {
    let mut img = random_image(32, 32, 5);
    img.data_mut()[10] = 1.5;
    assert!(augment(&img, &AugmentConfig::default(), &mut substream(0, &[])).is_err());
    let mut cfg = AugmentConfig::default();
    cfg.crop_area_range = [0.9, 0.5];
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn augmentation_output_shape_and_range(seed in any::<u64>(), h in 32usize..80, w in 32usize..80) {
        let img = random_image(h, w, seed);
        let out = augment(&img, &AugmentConfig::default(), &mut substream(seed, &[0])).unwrap();
        prop_assert_eq!(out.shape(), &[3, 160, 160]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn ppm_bytes_decode_to_exact_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ppm");
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend([0, 51, 255, 10, 20, 30, 128, 64, 32, 255, 255, 255]);
    std::fs::write(&path, &bytes).unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.shape(), &[3, 2, 2]);
    let expect = [[0, 10, 128, 255], [51, 20, 64, 255], [255, 30, 32, 255]];
    for c in 0..3 {
        for p in 0..4 {
            assert_eq!(t.data()[c * 4 + p], expect[c][p] as f64 / 255.0);
        }
    }
}

#[test]
fn black_png_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let black = dir.path().join("black.png");
    save_image(&black, &Tensor::zeros(&[3, 5, 4])).unwrap();
    assert_eq!(load_image(&black).unwrap(), Tensor::zeros(&[3, 5, 4]));

    let img = random_image(9, 11, 6);
    for ext in ["ppm", "png"] {
        let p = dir.path().join(format!("r.{ext}"));
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "{ext}: {worst}");
    }
}

#[test]
fn broken_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_image(8, 8, 7);
    let p = dir.path().join("x.png");
    save_image(&p, &img).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_image(&p), Err(Error::Image { .. })));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not an image at all").unwrap();
    assert!(load_image(&junk).is_err());

    let src = DirSource::new(dir.path());
    assert_eq!(src.missing(&["x", "nope"]), vec!["nope"]);
}
