use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rave::backend::LayerActivations;
use rave::losses::*;

const TOL: f64 = 1e-6;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    x.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[0]
}

fn acts(v: &[f64]) -> LayerActivations {
    LayerActivations {
        stages: vec![0],
        per_layer: vec![row(v)],
    }
}

fn refine(w: f64, b: f64, tt: f64, p: f64, m: Margins) -> f64 {
    scalar(&prompt_refinement_loss(&t(&[w]), &t(&[b]), &t(&[tt]), &t(&[p]), m).unwrap())
}

#[test]
fn softmax_cases() {
    assert!((scalar(&guidance_softmax(&t(&[0.3]), &t(&[0.3])).unwrap()) - 0.5).abs() < TOL);
    let e2 = 1f64.exp().powi(2);
    let hi = scalar(&guidance_softmax(&t(&[1.0]), &t(&[-1.0])).unwrap());
    let lo = scalar(&guidance_softmax(&t(&[-1.0]), &t(&[1.0])).unwrap());
    assert!((hi - e2 / (e2 + 1.0)).abs() < TOL);
    assert!((hi + lo - 1.0).abs() < TOL);
}

#[test]
fn cross_entropy_cases() {
    let ln2 = 2f64.ln();
    for y in [0.0, 1.0] {
        let l = scalar(&initial_classification_loss(&t(&[0.5]), &t(&[y])).unwrap());
        assert!((l - ln2).abs() < TOL);
    }
    let l = scalar(&initial_classification_loss(&t(&[0.8808]), &t(&[1.0])).unwrap());
    assert!((l + 0.8808f64.ln()).abs() < TOL);
    // Saturated predictions stay finite.
    let l = scalar(&initial_classification_loss(&t(&[0.0]), &t(&[1.0])).unwrap());
    assert!(l.is_finite() && l > 10.0);
}

#[test]
fn guidance_loss_cases() {
    let e = row(&[1.0, 2.0, 0.0]);
    let same =
        scalar(&clip_guidance_loss(&e, &t(&[0.0, 0.0, 1.0]), &t(&[0.0, 0.0, -1.0])).unwrap());
    assert!((same - 0.5).abs() < TOL);
    let e = row(&[1.0, 0.0]);
    let pos = t(&[2.0, 0.0]);
    let neg = t(&[0.0, 3.0]);
    let v = scalar(&clip_guidance_loss(&e, &pos, &neg).unwrap());
    assert!((v - 1.0 / (1.0 + 1f64.exp())).abs() < TOL);
    let swapped = scalar(&clip_guidance_loss(&e, &neg, &pos).unwrap());
    assert!((v + swapped - 1.0).abs() < TOL);
    let score = scalar(&negative_similarity_score(&e, &pos, &neg).unwrap());
    assert_eq!(score, v);
}

#[test]
fn zero_guidance_is_degenerate() {
    let e = row(&[1.0, 0.0]);
    let err = clip_guidance_loss(&e, &t(&[0.0, 0.0]), &t(&[0.0, 1.0])).unwrap_err();
    assert!(err.is_degenerate());
}

#[test]
fn refinement_cases() {
    assert!((refine(0.0, 1.0, 0.1, 0.5, Margins::DEFAULT) - 0.5).abs() < TOL);
    let zero = Margins::new(0.0, 0.0, 0.0).unwrap();
    assert!(refine(0.0, 1.0, 0.5, 1.0, zero).abs() < TOL);
    assert!((refine(0.5, 0.5, 0.5, 0.5, Margins::DEFAULT) - 2.2).abs() < TOL);
}

#[test]
fn margins_outside_unit_interval_are_rejected() {
    assert!(Margins::new(1.1, 0.2, 0.2).is_err());
    assert!(Margins::new(0.9, -0.1, 0.2).is_err());
}

#[test]
fn identity_cases() {
    let a = acts(&[1.0, 2.0]);
    assert!(scalar(&identity_loss(&a, &a, &[1.0]).unwrap()) < 1e-9);
    let b = acts(&[0.0, 0.0]);
    let c = acts(&[3.0, 4.0]);
    assert!((scalar(&identity_loss(&b, &c, &[2.0]).unwrap()) - 10.0).abs() < TOL);
    assert!(identity_loss(&b, &acts(&[1.0, 2.0, 3.0]), &[1.0]).is_err());
    assert!(identity_loss(&b, &c, &[1.0, 1.0]).is_err());
}

#[test]
fn residual_cases() {
    let v_res = t(&[0.6, 0.8]);
    let v_well = [0.8, 0.6];
    let target = 0.8 * 0.6 + 0.6 * 0.8;
    let at_well = scalar(&residual_loss(&row(&v_well), &v_res, target, true).unwrap());
    assert!(at_well.abs() < TOL);
    // Orthogonal to the direction: loss is the squared target.
    let ortho = scalar(&residual_loss(&row(&[-0.8, 0.6]), &v_res, target, true).unwrap());
    assert!((ortho - target * target).abs() < TOL);
    // Backlit mean: squared gap between the two projections.
    let v_back = [0.28, 0.96];
    let p_back = 0.6 * 0.28 + 0.8 * 0.96;
    let at_back = scalar(&residual_loss(&row(&v_back), &v_res, target, true).unwrap());
    assert!((at_back - (p_back - target).powi(2)).abs() < TOL);
    // Without normalization the raw embedding is projected.
    let raw = scalar(&residual_loss(&row(&[1.6, 1.2]), &v_res, target, false).unwrap());
    assert!((raw - target * target).abs() < TOL);
}

#[test]
fn weighted_sums() {
    let e = scalar(&enhance_loss(&t(&[0.3]), &t(&[0.1]), 0.9).unwrap());
    assert!((e - 0.39).abs() < TOL);
    let r = scalar(&rave_loss(&t(&[0.1]), &t(&[0.05]), 6.0).unwrap());
    assert!((r - 0.4).abs() < TOL);
    assert!((scalar(&rave_loss(&t(&[0.1]), &t(&[0.05]), 0.0).unwrap()) - 0.1).abs() < TOL);
}

#[test]
fn loss_config_validation() {
    let ok = LossConfig {
        omega: 1.0,
        alpha: vec![1.0, 1.0],
        margins: Margins::DEFAULT,
        normalize_image_embedding: true,
    };
    ok.validate(2).unwrap();
    assert!(ok.validate(3).is_err());
    assert!(LossConfig {
        omega: -1.0,
        ..ok.clone()
    }
    .validate(2)
    .is_err());
}

proptest! {
    #[test]
    fn softmax_is_a_probability(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let p = scalar(&guidance_softmax(&t(&[a]), &t(&[b])).unwrap());
        let q = scalar(&guidance_softmax(&t(&[b]), &t(&[a])).unwrap());
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_roles_are_complementary(
        e in prop::collection::vec(-1.0f64..1.0, 4),
        p in prop::collection::vec(0.1f64..1.0, 4),
        n in prop::collection::vec(-1.0f64..-0.1, 4),
    ) {
        let a = scalar(&clip_guidance_loss(&row(&e), &t(&p), &t(&n)).unwrap());
        let b = scalar(&clip_guidance_loss(&row(&e), &t(&n), &t(&p)).unwrap());
        prop_assert!(a > 0.0 && a < 1.0);
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_is_nonnegative_and_monotone_in_margins(
        s in prop::collection::vec(0.0f64..1.0, 4),
        m in prop::collection::vec(0.0f64..0.9, 3),
        bump in 0.0f64..0.1,
        which in 0usize..3,
    ) {
        let base = Margins::new(m[0], m[1], m[2]).unwrap();
        let mut more = base;
        match which {
            0 => more.m0 += bump,
            1 => more.m1 += bump,
            _ => more.m2 += bump,
        }
        let l0 = refine(s[0], s[1], s[2], s[3], base);
        let l1 = refine(s[0], s[1], s[2], s[3], more);
        prop_assert!(l0 >= 0.0);
        prop_assert!(l1 >= l0 - 1e-12);
    }

    #[test]
    fn residual_depends_only_on_projection(
        e in prop::collection::vec(-1.0f64..1.0, 3),
        shift in -2.0f64..2.0,
        target in -1.0f64..1.0,
    ) {
        // v_res = e_z; moving along x leaves the raw projection unchanged.
        let v = t(&[0.0, 0.0, 1.0]);
        let a = scalar(&residual_loss(&row(&e), &v, target, false).unwrap());
        let b = scalar(&residual_loss(&row(&[e[0] + shift, e[1], e[2]]), &v, target, false).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identity_is_nonnegative(
        a in prop::collection::vec(-1.0f64..1.0, 5),
        b in prop::collection::vec(-1.0f64..1.0, 5),
        w in 0.0f64..3.0,
    ) {
        let l = scalar(&identity_loss(&acts(&a), &acts(&b), &[w]).unwrap());
        prop_assert!(l >= 0.0);
    }
}
