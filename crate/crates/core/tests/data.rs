use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device};
use proptest::prelude::*;
use rave::data::*;
use rave::image::ImageTensor;
use rave::synthetic::textured_image;

fn write(dir: &Path, rel: &str, img: &ImageTensor) {
    let p = dir.join(rel);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    img.save(&p).unwrap();
}

fn corpus(root: &Path, back: &[&str], well: &[&str]) {
    for (i, r) in back.iter().enumerate() {
        write(
            &root.join(BACKLIT_DIR),
            r,
            &textured_image(20, 24, 0.15, i as u64),
        );
    }
    for (i, r) in well.iter().enumerate() {
        write(
            &root.join(WELL_LIT_DIR),
            r,
            &textured_image(20, 24, 0.6, 50 + i as u64),
        );
    }
}

fn memory_set(n: usize, size: usize, level: f32) -> TrainingSet {
    let imgs = (0..n)
        .map(|i| textured_image(size, size, level, i as u64))
        .collect();
    TrainingSet::new(Box::new(MemorySource::new(imgs)), size).unwrap()
}

#[test]
fn pairs_by_stem_across_extensions_and_folders() {
    let dir = tempfile::tempdir().unwrap();
    corpus(
        dir.path(),
        &["a.png", "sub/b.png", "c.jpg"],
        &["c.png", "a.bmp", "sub/b.png"],
    );
    let index = scan_corpus(&CorpusSpec::from_root(
        dir.path(),
        Pairing::PairedByFilename,
    ))
    .unwrap();
    assert!(index.is_paired());
    let stems: Vec<(&str, &str)> = index
        .backlit
        .iter()
        .zip(&index.well_lit)
        .map(|(b, w)| (b.stem(), w.stem()))
        .collect();
    assert!(stems.iter().all(|(b, w)| b == w));
    let names: Vec<&str> = index.backlit.iter().map(|e| e.relative.as_str()).collect();
    assert_eq!(names, vec!["a.png", "c.jpg", "sub/b.png"]);
}

#[test]
fn missing_partner_names_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), &["a.png", "lonely.png"], &["a.png"]);
    let err = scan_corpus(&CorpusSpec::from_root(
        dir.path(),
        Pairing::PairedByFilename,
    ))
    .unwrap_err();
    assert!(err.to_string().contains("lonely"), "{err}");
    let index = scan_corpus(&CorpusSpec::from_root(dir.path(), Pairing::Unpaired)).unwrap();
    assert_eq!((index.backlit.len(), index.well_lit.len()), (2, 1));
    assert!(!index.is_paired());
}

#[test]
fn fingerprint_tracks_content() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), &["a.png", "b.png"], &["a.png", "b.png"]);
    let spec = CorpusSpec::from_root(dir.path(), Pairing::PairedByFilename);
    let f1 = scan_corpus(&spec).unwrap().fingerprint;
    assert_eq!(f1, scan_corpus(&spec).unwrap().fingerprint);
    write(
        &dir.path().join(BACKLIT_DIR),
        "b.png",
        &textured_image(20, 24, 0.2, 99),
    );
    assert_ne!(f1, scan_corpus(&spec).unwrap().fingerprint);
}

#[test]
fn empty_or_missing_directories_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scan_corpus(&CorpusSpec::from_root(dir.path(), Pairing::Unpaired)).is_err());
    std::fs::create_dir_all(dir.path().join(BACKLIT_DIR)).unwrap();
    std::fs::create_dir_all(dir.path().join(WELL_LIT_DIR)).unwrap();
    assert!(scan_corpus(&CorpusSpec::from_root(dir.path(), Pairing::Unpaired)).is_err());
}

#[test]
fn eval_items_follow_the_long_side() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), &["a.png"], &["a.png"]);
    let index = scan_corpus(&CorpusSpec::from_root(
        dir.path(),
        Pairing::PairedByFilename,
    ))
    .unwrap();
    let items: Vec<EvalItem> = eval_iterator(&index, 48)
        .collect::<rave::Result<_>>()
        .unwrap();
    let it = &items[0];
    assert_eq!((it.backlit.height(), it.backlit.width()), (40, 48));
    let gt = it.ground_truth.as_ref().unwrap();
    assert_eq!((gt.height(), gt.width()), (40, 48));
}

#[test]
fn batches_are_reproducible_and_augmented_in_lockstep() {
    let (back, well) = rave::synthetic::paired_corpora(6, 16, 0.25, 8);
    let inputs = TrainingSet::new(Box::new(MemorySource::new(back)), 16).unwrap();
    let targets = TrainingSet::new(Box::new(MemorySource::new(well)), 16).unwrap();
    let aug = AugmentConfig::default();
    let b = |seed, step| {
        training_batch(
            &inputs,
            Some(&targets),
            3,
            &aug,
            seed,
            step,
            &Device::Cpu,
            DType::F32,
        )
        .unwrap()
    };
    let (x, y) = (b(1, 4), b(1, 4));
    assert_eq!(x.items, y.items);
    let flat = |t: &candle_core::Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&x.inputs), flat(&y.inputs));
    assert_ne!(flat(&x.inputs), flat(&b(2, 4).inputs));
    // Inputs are targets scaled by 0.25; the ratio survives only a shared warp.
    let (xi, ti) = (flat(&x.inputs), flat(&x.targets.unwrap()));
    assert!(xi
        .iter()
        .zip(&ti)
        .filter(|(_, t)| **t > 0.05)
        .all(|(a, t)| (a / t - 0.25).abs() < 1e-3));
}

#[test]
fn oversized_batch_is_rejected() {
    let set = memory_set(2, 8, 0.3);
    let r = training_batch(
        &set,
        None,
        3,
        &AugmentConfig::disabled(),
        0,
        0,
        &Device::Cpu,
        DType::F32,
    );
    assert!(r.is_err());
}

#[test]
fn disabled_augmentation_is_identity() {
    let img = textured_image(12, 12, 0.4, 3);
    let p = sample_augment(&AugmentConfig::disabled(), 1, 2, 3);
    assert_eq!(p, AugmentParams::IDENTITY);
    assert_eq!(apply_augment(&img, &p).data(), img.data());
}

#[test]
fn flip_only_mirrors() {
    let img = textured_image(8, 10, 0.4, 4);
    let p = AugmentParams {
        flip: true,
        zoom: 1.0,
        angle_deg: 0.0,
    };
    let out = apply_augment(&img, &p);
    let want = img.flip_horizontal();
    let diff = out
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5);
}

#[test]
fn bad_augment_config_is_rejected() {
    let mut cfg = AugmentConfig::default();
    cfg.flip_prob = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = AugmentConfig::default();
    cfg.zoom = (1.2, 1.0);
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_epoch_visits_each_item_once(n in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let seen: BTreeSet<usize> = (0..n as u64).map(|k| stream_item(n, seed, epoch * n as u64 + k)).collect();
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.iter().all(|&i| i < n));
    }

    #[test]
    fn augmentation_keeps_shape_and_range(seed in any::<u64>(), step in 0u64..100, h in 4usize..20, w in 4usize..20) {
        let img = textured_image(h, w, 0.5, seed % 97);
        let p = sample_augment(&AugmentConfig::default(), seed, step, 0);
        prop_assert!(p.zoom >= 1.0 && p.zoom <= 1.2);
        prop_assert!(p.angle_deg.abs() <= 10.0);
        let out = apply_augment(&img, &p);
        prop_assert_eq!((out.height(), out.width()), (h, w));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
