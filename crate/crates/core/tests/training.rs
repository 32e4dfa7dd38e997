mod common;

use std::path::Path;

use candle_core::{DType, Device};
use rave::backend::BackendHandle;
use rave::enhance::{enhance_tensor, Frozen};
use rave::residual::{compute_residual, ResidualVector};
use rave::synthetic::dark_bright_corpora;
use rave::train::*;

const RESUME_TOL: f64 = 1e-6;

fn handle_for(cfg: &TrainConfig) -> BackendHandle {
    if cfg.backend == rave::backend::MOCK_CLIP {
        common::mock_clip()
    } else {
        common::mock_linear()
    }
}

fn tiny_residual(h: &BackendHandle) -> ResidualVector {
    let (dark, bright) = dark_bright_corpora(4, 16, 21);
    compute_residual(h, dark.into_iter().map(Ok), bright.into_iter().map(Ok)).unwrap()
}

fn trainer(cfg: &TrainConfig, out: Option<&Path>) -> Trainer {
    let h = handle_for(cfg);
    let rv = (cfg.method == Method::Rave).then(|| tiny_residual(&h));
    Trainer::new(
        cfg.clone(),
        h,
        common::tiny_data(5),
        rv.as_ref(),
        out.map(Path::to_path_buf),
    )
    .unwrap()
}

fn resume(cfg: &TrainConfig, ckpt: &Path, out: &Path) -> Trainer {
    let h = handle_for(cfg);
    let rv = (cfg.method == Method::Rave).then(|| tiny_residual(&h));
    Trainer::resume(
        ckpt,
        h,
        common::tiny_data(5),
        rv.as_ref(),
        Some(out.to_path_buf()),
    )
    .unwrap()
}

fn records(t: &mut Trainer) -> Vec<LossRecord> {
    let mut out = Vec::new();
    t.run_with(|r| out.push(r.clone())).unwrap();
    out
}

fn assert_trajectories_match(a: &[LossRecord], b: &[LossRecord], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: lengths differ");
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.step, &x.phase), (y.step, &y.phase), "{what}");
        let pairs = [
            (Some(x.total), Some(y.total)),
            (x.identity, y.identity),
            (x.clip, y.clip),
            (x.residual, y.residual),
            (x.guidance, y.guidance),
        ];
        for (p, q) in pairs {
            match (p, q) {
                (Some(p), Some(q)) => assert!(
                    (p - q).abs() <= RESUME_TOL,
                    "{what}: step {} differs: {p} vs {q}",
                    x.step
                ),
                (None, None) => {}
                _ => panic!("{what}: step {} logs different terms", x.step),
            }
        }
    }
}

fn all_methods() -> [Method; 3] {
    [Method::Rave, Method::ClipLit, Method::ClipLitLatent]
}

#[test]
fn phases_run_in_order() {
    let mut t = trainer(&common::tiny_config(Method::ClipLitLatent), None);
    let recs = records(&mut t);
    let phases: Vec<&str> = recs.iter().map(|r| r.phase.as_str()).collect();
    let mut order = phases.clone();
    order.dedup();
    assert_eq!(
        order,
        vec![
            "guidance_init",
            "enhance",
            "refine_guidance",
            "refine_enhance"
        ]
    );
    assert!(t.is_done());
    assert_eq!(t.global_step() as usize, recs.len());
    assert_eq!(t.manifest().guidance_init_steps, Some(3));
    assert!(t.snapshot().is_some());
}

#[test]
fn warmup_logs_identity_only() {
    let mut cfg = common::tiny_config(Method::ClipLit);
    cfg.warmup_identity_iters = 4;
    cfg.refine_rounds = 0;
    let mut t = trainer(&cfg, None);
    let enh: Vec<LossRecord> = records(&mut t)
        .into_iter()
        .filter(|r| r.phase == "enhance")
        .collect();
    assert_eq!(enh.len(), 6);
    for (i, r) in enh.iter().enumerate() {
        assert!(r.identity.is_some() && r.residual.is_none() && r.guidance.is_none());
        if i < 4 {
            assert!(r.clip.is_none(), "iteration {i} has a guidance term");
            assert_eq!(r.total, r.identity.unwrap());
        } else {
            assert!(r.clip.is_some(), "iteration {i} lacks a guidance term");
        }
    }
}

#[test]
fn rave_logs_identity_and_residual() {
    let mut t = trainer(&common::tiny_config(Method::Rave), None);
    let recs = records(&mut t);
    assert_eq!(recs.len(), 6);
    for r in &recs {
        assert_eq!(r.phase, "enhance");
        let (i, res) = (r.identity.unwrap(), r.residual.unwrap());
        assert!(r.clip.is_none() && r.guidance.is_none());
        assert!((r.total - (i + 6.0 * res)).abs() < 1e-5);
    }
}

#[test]
fn same_seed_gives_identical_manifests_and_checkpoints() {
    for method in all_methods() {
        let mut cfg = common::tiny_config(method);
        cfg.checkpoint_every = 4;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        trainer(&cfg, Some(a.path())).run().unwrap();
        trainer(&cfg, Some(b.path())).run().unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb, "{method}: manifests differ");
        let m = RunManifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
        assert!(m.checkpoints.len() >= 2);
        for c in &m.checkpoints {
            let bytes = std::fs::read(b.path().join(&c.file)).unwrap();
            assert_eq!(rave::ops::sha256_hex(&bytes), c.sha256);
        }
    }
}

#[test]
fn different_seed_changes_the_run() {
    let cfg = common::tiny_config(Method::Rave);
    let mut other = cfg.clone();
    other.seed += 1;
    let a = records(&mut trainer(&cfg, None));
    let b = records(&mut trainer(&other, None));
    assert!(a.iter().zip(&b).any(|(x, y)| x.total != y.total));
}

#[test]
fn resume_from_every_checkpoint_matches_uninterrupted_run() {
    for method in all_methods() {
        let mut cfg = common::tiny_config(method);
        cfg.checkpoint_every = 1;
        let full_dir = tempfile::tempdir().unwrap();
        let mut full = trainer(&cfg, Some(full_dir.path()));
        let reference = records(&mut full);
        let final_checksum = full.model().checksum().unwrap();
        let manifest = full.manifest().clone();
        for entry in &manifest.checkpoints {
            let out = tempfile::tempdir().unwrap();
            let mut t = resume(&cfg, &full_dir.path().join(&entry.file), out.path());
            assert_eq!(t.global_step(), entry.step);
            let rest = records(&mut t);
            let what = format!("{method} resumed at {}", entry.step);
            assert_trajectories_match(&reference[entry.step as usize..], &rest, &what);
            assert_trajectories_match(&reference, &t.manifest().losses, &what);
            assert_eq!(t.model().checksum().unwrap(), final_checksum, "{what}");
        }
    }
}

#[test]
fn resume_rejects_different_data_or_backend() {
    let mut cfg = common::tiny_config(Method::ClipLitLatent);
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    trainer(&cfg, Some(dir.path())).run().unwrap();
    let ckpt = dir.path().join("ckpt-00000002.safetensors");
    let out = tempfile::tempdir().unwrap();
    let other = Trainer::resume(
        &ckpt,
        common::mock_linear(),
        common::tiny_data(6),
        None,
        Some(out.path().into()),
    );
    assert!(other.is_err());
    let wrong = Trainer::resume(
        &ckpt,
        common::mock_clip(),
        common::tiny_data(5),
        None,
        Some(out.path().into()),
    );
    assert!(wrong.is_err());
}

#[test]
fn checkpointed_model_reproduces_outputs() {
    let mut cfg = common::tiny_config(Method::Rave);
    cfg.checkpoint_every = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(&cfg, Some(dir.path()));
    t.run().unwrap();
    let m = t.manifest();
    assert_eq!(m.checkpoints.len(), 1, "only the final checkpoint");
    let path = dir.path().join(&m.checkpoints[0].file);
    let loaded = load_model(&path, &Device::Cpu, DType::F32).unwrap();
    let (dark, _) = dark_bright_corpora(2, 24, 3);
    let x = common::to_batch(&dark, t.handle());
    let a = enhance_tensor(&Frozen(t.model()), &x).unwrap().enhanced;
    let b = enhance_tensor(&Frozen(&loaded), &x).unwrap().enhanced;
    let diff = (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn guidance_init_stops_at_threshold() {
    let mut cfg = common::tiny_config(Method::ClipLitLatent);
    cfg.guidance_init_threshold = 10.0;
    let mut t = trainer(&cfg, None);
    t.run().unwrap();
    assert_eq!(t.manifest().guidance_init_steps, Some(1));
}

#[test]
fn invalid_setups_are_rejected() {
    let cfg = common::tiny_config(Method::Rave);
    let h = common::mock_linear();
    assert!(Trainer::new(cfg, h.clone(), common::tiny_data(5), None, None).is_err());

    let mut cfg = common::tiny_config(Method::ClipLit);
    cfg.backend = rave::backend::MOCK_LINEAR.into();
    let err = Trainer::new(cfg, h.clone(), common::tiny_data(5), None, None)
        .err()
        .unwrap();
    assert!(matches!(err, rave::Error::NoTextTower(_)), "{err}");

    let mut cfg = common::tiny_config(Method::ClipLitLatent);
    cfg.batch_enhance = 9;
    assert!(Trainer::new(cfg, h, common::tiny_data(5), None, None).is_err());
}

#[test]
fn config_file_round_trip_and_precedence() {
    let text = "# toy\nmethod = rave\nomega = 3\nseed=9\nlayers = 0,2\n";
    let mut cfg = TrainConfig::defaults(Method::Rave);
    for (k, v) in parse_key_values(text).unwrap() {
        cfg.set(&k, &v).unwrap();
    }
    assert_eq!(
        (cfg.omega, cfg.seed, cfg.layers.clone()),
        (3.0, 9, vec![0, 2])
    );
    cfg.set("omega", "4").unwrap();
    assert_eq!(cfg.omega, 4.0);
    assert!(cfg.set("method", "clip-lit").is_err());
    assert!(cfg.set("no_such_key", "1").is_err());
    let back = TrainConfig::from_map(&cfg.to_map()).unwrap();
    assert_eq!(back.to_map(), cfg.to_map());
}

#[test]
fn refinement_batch_needs_a_snapshot() {
    let h = common::mock_linear();
    let cfg = common::tiny_config(Method::ClipLitLatent);
    let t = trainer(&cfg, None);
    let (dark, bright) = dark_bright_corpora(2, 16, 1);
    let (b, w) = (common::to_batch(&dark, &h), common::to_batch(&bright, &h));
    assert!(make_refinement_batch(t.model(), None, &w, &b).is_err());
    let batch = make_refinement_batch(t.model(), Some(t.model()), &w, &b).unwrap();
    let diff = (&batch.enhanced - &batch.previous)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap();
    assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
}
