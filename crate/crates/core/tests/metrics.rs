mod common;

use candle_core::{DType, Device};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use rave::data::EvalItem;
use rave::enhance::ConstantIllumination;
use rave::image::ImageTensor;
use rave::metrics::*;
use rave::ops::seeded_rng;
use rave::synthetic::textured_image;
use serde_json::Value;

fn reference() -> Value {
    let text = include_str!("fixtures/metric_reference.json");
    serde_json::from_str(text).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn matrix(v: &Value) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = v.as_array().unwrap().iter().map(floats).collect();
    feature_matrix(&rows).unwrap()
}

fn gaussian(n: usize, d: usize, shift: &[f64], seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    DMatrix::from_fn(n, d, |_, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z + shift[j]
    })
}

#[test]
fn identical_images() {
    let a = textured_image(32, 40, 0.4, 1);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_of_constant_offset() {
    let a = ImageTensor::filled(8, 8, [0.5; 3]);
    let b = ImageTensor::filled(8, 8, [0.6; 3]);
    // MSE 0.01 gives 20 dB; f32 storage limits the agreement.
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn ssim_of_constant_images() {
    let a = ImageTensor::filled(16, 16, [0.2; 3]);
    let b = ImageTensor::filled(16, 16, [0.7; 3]);
    let (x, y) = (0.2f32 as f64, 0.7f32 as f64);
    let c1 = 0.01f64.powi(2);
    let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
    assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-6);
}

#[test]
fn matches_reference_implementations() {
    let r = reference();
    for p in r["pairs"].as_array().unwrap() {
        let (h, w) = (
            p["height"].as_u64().unwrap() as usize,
            p["width"].as_u64().unwrap() as usize,
        );
        let img = |k: &str| {
            ImageTensor::new(h, w, floats(&p[k]).iter().map(|&v| v as f32).collect()).unwrap()
        };
        let (a, b) = (img("a"), img("b"));
        assert!((psnr(&a, &b).unwrap() - p["psnr"].as_f64().unwrap()).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - p["ssim"].as_f64().unwrap()).abs() < 1e-6);
    }
    let f = &r["fid"];
    let got = fid(&matrix(&f["a"]), &matrix(&f["b"])).unwrap();
    let want = f["value"].as_f64().unwrap();
    assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn ssim_rejects_small_or_mismatched_images() {
    let a = ImageTensor::filled(10, 30, [0.5; 3]);
    assert!(ssim(&a, &a).is_err());
    let b = ImageTensor::filled(12, 12, [0.5; 3]);
    let c = ImageTensor::filled(12, 13, [0.5; 3]);
    assert!(ssim(&b, &c).is_err());
    assert!(psnr(&b, &c).is_err());
}

#[test]
fn fid_of_identical_sets_is_zero() {
    let a = gaussian(200, 4, &[0.0; 4], 1);
    assert!(fid(&a, &a).unwrap().abs() < 1e-8);
}

#[test]
fn fid_of_shifted_copy_is_squared_offset() {
    let a = gaussian(300, 4, &[0.0; 4], 2);
    let shift = [1.0, -0.5, 0.25, 2.0];
    let b = DMatrix::from_fn(300, 4, |i, j| a[(i, j)] + shift[j]);
    let want: f64 = shift.iter().map(|s| s * s).sum();
    assert!((fid(&a, &b).unwrap() - want).abs() < 1e-8);
}

#[test]
fn fid_of_independent_shifted_samples() {
    // Two draws from N(0, I) and N(δ, I): FID → ‖δ‖² as n grows; the slack
    // covers sampling error at n = 4000, d = 4.
    let shift = [1.0, 0.0, -1.0, 1.0];
    let a = gaussian(4000, 4, &[0.0; 4], 3);
    let b = gaussian(4000, 4, &shift, 4);
    let got = fid(&a, &b).unwrap();
    assert!((got - 3.0).abs() < 0.15, "{got}");
}

#[test]
fn fid_needs_two_samples_and_matching_width() {
    let a = gaussian(1, 3, &[0.0; 3], 5);
    let b = gaussian(5, 3, &[0.0; 3], 6);
    assert!(fid(&a, &b).is_err());
    assert!(fid(&b, &gaussian(5, 4, &[0.0; 4], 7)).is_err());
}

#[test]
fn lpips_without_backend_is_reported() {
    let a = ImageTensor::filled(16, 16, [0.5; 3]);
    assert!(matches!(
        lpips(&a, &a, None),
        Err(rave::Error::MissingBackend(_))
    ));
}

#[test]
fn parses_metric_lists() {
    assert_eq!(
        parse_metrics("psnr, ssim,psnr").unwrap(),
        vec![Metric::Psnr, Metric::Ssim]
    );
    assert!(parse_metrics("psnr,bogus").is_err());
    assert!(parse_metrics("").is_err());
}

fn eval_items(n: usize) -> Vec<rave::Result<EvalItem>> {
    (0..n)
        .map(|i| {
            let gt = textured_image(24, 20, 0.6, 10 + i as u64);
            let back =
                ImageTensor::new(24, 20, gt.data().iter().map(|v| v * 0.25).collect()).unwrap();
            Ok(EvalItem {
                name: format!("img{i}.png"),
                backlit: back,
                ground_truth: Some(gt),
            })
        })
        .collect()
}

#[test]
fn report_means_are_exact_column_averages() {
    let backends = MetricBackends {
        perceptual: None,
        features: None,
        fid_reference: None,
    };
    let report = evaluate(
        &ConstantIllumination(0.3),
        eval_items(5),
        &[Metric::Psnr, Metric::Ssim],
        &backends,
        &Device::Cpu,
        DType::F32,
    )
    .unwrap();
    assert_eq!(report.per_image.len(), 5);
    let mean = |f: fn(&PerImageMetrics) -> Option<f64>| {
        report.per_image.iter().map(|r| f(r).unwrap()).sum::<f64>() / 5.0
    };
    assert_eq!(report.psnr.unwrap(), mean(|r| r.psnr));
    assert_eq!(report.ssim.unwrap(), mean(|r| r.ssim));
    assert!(report.lpips.is_none() && report.fid.is_none());
    let table = report.to_table();
    assert!(table.lines().count() >= 7);
    assert!(report.to_record().contains("psnr = "));
}

#[test]
fn fid_through_evaluate_uses_ground_truth() {
    let h = common::mock_linear();
    let feats = EmbeddingFeatures::new(h);
    let backends = MetricBackends {
        perceptual: None,
        features: Some(&feats),
        fid_reference: None,
    };
    let report = evaluate(
        &ConstantIllumination(1.0),
        eval_items(12),
        &[Metric::Fid],
        &backends,
        &Device::Cpu,
        DType::F32,
    )
    .unwrap();
    assert!(report.fid.unwrap() > 0.0);
    let missing = MetricBackends {
        perceptual: None,
        features: None,
        fid_reference: None,
    };
    let err = evaluate(
        &ConstantIllumination(1.0),
        eval_items(2),
        &[Metric::Fid],
        &missing,
        &Device::Cpu,
        DType::F32,
    )
    .unwrap_err();
    assert!(matches!(err, rave::Error::MissingBackend(_)));
}

#[test]
fn unpaired_items_cannot_score_psnr() {
    let items = vec![Ok(EvalItem {
        name: "x.png".into(),
        backlit: ImageTensor::filled(16, 16, [0.2; 3]),
        ground_truth: None,
    })];
    let backends = MetricBackends {
        perceptual: None,
        features: None,
        fid_reference: None,
    };
    let r = evaluate(
        &ConstantIllumination(0.5),
        items,
        &[Metric::Psnr],
        &backends,
        &Device::Cpu,
        DType::F32,
    );
    assert!(r.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in 0u64..500, s2 in 0u64..500, l1 in 0.1f32..0.9, l2 in 0.1f32..0.9) {
        let a = textured_image(16, 16, l1, s1);
        let b = textured_image(16, 16, l2, s2);
        let p = psnr(&a, &b).unwrap();
        let q = psnr(&b, &a).unwrap();
        prop_assert!(p == q && p > 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
    }

    #[test]
    fn fid_is_nonnegative_and_symmetric(s1 in 0u64..500, s2 in 0u64..500) {
        let a = gaussian(30, 3, &[0.0; 3], s1);
        let b = gaussian(25, 3, &[0.5, 0.0, 0.0], s2 + 1000);
        let x = fid(&a, &b).unwrap();
        let y = fid(&b, &a).unwrap();
        prop_assert!(x >= 0.0);
        prop_assert!((x - y).abs() < 1e-8 * x.max(1.0));
    }
}
