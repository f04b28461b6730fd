use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deferral_core::fusion::{classify, saliency, ClassifierArch, ClassifierNet, FusionInput, Nonimaging, SaliencySpec};
use deferral_core::imageproc::{AugmentSpec, GrayImage, VIEW_HEIGHT, VIEW_WIDTH};
use deferral_core::loss::{focal_grad, focal_loss, triage_sample_loss, FocalParams};
use deferral_core::mtlnet::{predict_tta, MtlArch, MtlNet, Mto, MTO_DIM};
use deferral_core::triage::{train_triage_candidate, TriageArch, TriageCase, TriageTrainConfig, TRIAGE_DIM};

#[test]
fn focal_with_unit_alpha_and_zero_gamma_is_cross_entropy() {
    let fp = FocalParams::cross_entropy();
    for i in 0..500 {
        let p = (i as f64 + 0.5) / 500.0;
        for y in [false, true] {
            let pt = if y { p } else { 1.0 - p };
            assert!((focal_loss(p, y, fp) - (-pt.ln())).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn focal_gradient_matches_central_differences(
        p in 0.01f64..0.99, y in any::<bool>(), alpha in 0.1f64..4.0, gamma in 0.0f64..5.0,
    ) {
        let fp = FocalParams::new(alpha, gamma).unwrap();
        let h = 1e-5;
        let f = |d: f64| focal_loss(p + d, y, fp);
        // fourth-order central stencil
        let fd = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
        let an = focal_grad(p, y, fp);
        prop_assert!((an - fd).abs() / an.abs().max(1e-3) < 1e-6, "analytic {} fd {}", an, fd);
    }

    #[test]
    fn focal_is_nonnegative_and_decreasing_in_pt(
        a in 0.001f64..0.999, b in 0.001f64..0.999, alpha in 0.1f64..4.0, gamma in 0.0f64..5.0,
    ) {
        let fp = FocalParams::new(alpha, gamma).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        // for y = 1 the probability is p_t itself
        prop_assert!(focal_loss(lo, true, fp) >= focal_loss(hi, true, fp));
        prop_assert!(focal_loss(hi, true, fp) >= 0.0);
        prop_assert!(focal_loss(1.0 - lo, false, fp) >= focal_loss(1.0 - hi, false, fp));
    }

    #[test]
    fn triage_loss_is_affine_in_w(
        w1 in 0.0f64..1.0, w2 in 0.0f64..1.0, t in 0.0f64..1.0,
        l_r in any::<bool>(), l_c in any::<bool>(), b_r in 0.0f64..3.0, b_c in 0.0f64..3.0,
    ) {
        let f = |w: f64| triage_sample_loss(w, l_r, l_c, b_r, b_c);
        let mixed = f(t * w1 + (1.0 - t) * w2);
        prop_assert!((mixed - (t * f(w1) + (1.0 - t) * f(w2))).abs() < 1e-12);
    }
}

fn random_input(rng: &mut ChaCha8Rng) -> FusionInput {
    let mto = |rng: &mut ChaCha8Rng| {
        let z: Vec<f64> = (0..MTO_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        Mto::from_logits(&z)
    };
    FusionInput::from_views(
        [mto(rng), mto(rng), mto(rng), mto(rng)],
        Nonimaging { age: rng.random_range(0.0..1.0), family_history: rng.random_bool(0.2) },
    )
}

#[test]
fn classify_is_a_pure_function() {
    let net = ClassifierNet::init(ClassifierArch::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let fi = random_input(&mut rng);
        let a = classify(&net, &fi).unwrap();
        assert_eq!(a.to_bits(), classify(&net, &fi).unwrap().to_bits());
        assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn tta_averages_stay_on_the_simplex() {
    let arch = MtlArch { hidden: vec![8], ..MtlArch::default() };
    let net = MtlNet::init(arch, 4).unwrap();
    let img = GrayImage::from_fn(VIEW_WIDTH, VIEW_HEIGHT, |x, y| ((x + 2 * y) % 9) as f64 / 9.0);
    for n in [1, 3, 16] {
        let m = predict_tta(&net, &img, n, &AugmentSpec::default(), 9).unwrap();
        assert!(m.is_valid(1e-6));
        for head in [&m.diagnosis[..], &m.sign[..], &m.suspicion[..], &m.conspicuity[..]] {
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_network_has_zero_saliency() {
    let net = MtlNet::zeros(MtlArch::default());
    let img = GrayImage::from_fn(VIEW_WIDTH, VIEW_HEIGHT, |x, y| ((x * y) % 7) as f64 / 7.0);
    let heat = saliency(&net, &img, &AugmentSpec::default(), &SaliencySpec::default()).unwrap();
    assert!(heat.pixels.iter().all(|&v| v == 0.0));
}

/// Cases whose first two features spell out the two error flags.
fn flagged_cases(n: usize) -> Vec<TriageCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (0..n)
        .map(|i| {
            let outcome = rng.random_bool(0.5);
            let (l_r, l_c) = (i % 4 >= 2, i % 2 == 1);
            let rad = outcome != l_r;
            let prob = if outcome != l_c { 0.9 } else { 0.1 };
            let mut features: Vec<f64> = (0..TRIAGE_DIM).map(|_| rng.random_range(-0.1..0.1)).collect();
            features[0] = if l_r { 1.0 } else { -1.0 };
            features[1] = if l_c { 1.0 } else { -1.0 };
            TriageCase { id: format!("t{i}"), features, rad, prob, outcome }
        })
        .collect()
}

#[test]
fn raising_the_radiologist_penalty_routes_fewer_radiologist_errors() {
    let cases = flagged_cases(200);
    let cfg = TriageTrainConfig { arch: TriageArch { hidden: vec![16] }, epochs: 60, batch_size: 16, lr: 1e-2, ..Default::default() };
    let routed_errors = |b_r: f64| {
        let net = train_triage_candidate(&cases, b_r, 1.5, &cfg, 2).unwrap();
        cases.iter().filter(|c| c.l_r() && net.forward(&c.features).unwrap() >= 0.5).count()
    };
    let counts: Vec<usize> = [0.0, 0.25, 1.0, 2.0].into_iter().map(routed_errors).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    // at b_r = 0 both-wrong patients go to the radiologist, at b_r = 2 none do
    assert!(counts[0] > counts[3], "{counts:?}");
}
