use proptest::prelude::*;
use rayon::prelude::*;

use deferral_core::imageproc::{
    clahe, clahe_params_from_unit, clip_histogram, full_pipeline, gaussian_noise, lanczos_downscale, standardize,
    AugmentSpec, GeometryDraw, GrayImage, VIEW_HEIGHT, VIEW_WIDTH,
};
use deferral_core::rng;

fn image() -> impl Strategy<Value = GrayImage> {
    (4usize..40, 4usize..40).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..1.0, w * h).prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

/// Smooth image squeezed into a narrow intensity band.
fn low_contrast() -> impl Strategy<Value = GrayImage> {
    (0.1f64..0.8, 0.02f64..0.1, 0.05f64..0.5, 0.05f64..0.5).prop_map(|(base, span, fx, fy)| {
        GrayImage::from_fn(48, 48, |x, y| base + span * 0.5 * (1.0 + (fx * x as f64).sin() * (fy * y as f64).cos()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardize_is_idempotent(img in image()) {
        let once = standardize(&img);
        let twice = standardize(&once);
        for (a, b) in once.pixels.iter().zip(&twice.pixels) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn geometry_draws_respect_their_maxima(seed in any::<u64>(), rot in 0.0f64..45.0, m in 0.0f64..0.5) {
        let spec = AugmentSpec { max_rotation: rot, max_shear: m, max_zoom: m, max_shift: m, ..AugmentSpec::default() };
        let d = GeometryDraw::sample(&spec, &mut rng::rng(seed));
        prop_assert!(d.rotation_deg.abs() <= rot);
        prop_assert!(d.shear.abs() <= m && (d.zoom - 1.0).abs() <= m);
        prop_assert!(d.shift_x.abs() <= m && d.shift_y.abs() <= m);
    }

    #[test]
    fn clahe_grid_stays_within_log_band(u in 0.0f64..=1.0, v in 0.0f64..=1.0, k in 2u32..64, l in 0.1f64..8.0) {
        let (g, c) = clahe_params_from_unit(k, l, u, v);
        let span = (k as f64).log2();
        prop_assert!(g as f64 >= (k as f64 - span).round().max(2.0));
        prop_assert!(g as f64 <= (k as f64 + span).round());
        prop_assert!(c > 0.0 && c <= l + l.log2().abs() + 1e-12);
    }

    #[test]
    fn clipping_caps_bins_and_conserves_mass(h in prop::collection::vec(0.0f64..1.0, 256), clip in 1.0f64..8.0) {
        let total: f64 = h.iter().sum();
        let hist: Vec<f64> = h.iter().map(|v| v / total).collect();
        let ceiling = clip / 256.0;
        let (clipped, excess) = clip_histogram(&hist, ceiling);
        prop_assert!(clipped.iter().all(|&v| v <= ceiling));
        prop_assert!((clipped.iter().sum::<f64>() + excess - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clahe_does_not_lose_entropy_on_low_contrast(img in low_contrast(), grid in 2u32..6) {
        let out = clahe(&img, grid, 2.0).unwrap();
        prop_assert!(out.entropy() >= img.entropy());
    }

    #[test]
    fn pipeline_is_a_function_of_its_seed(img in image(), seed in any::<u64>()) {
        let spec = AugmentSpec { clahe_grid: 2, ..AugmentSpec::default() };
        let a = full_pipeline(&img, &spec, seed).unwrap();
        prop_assert_eq!(&a, &full_pipeline(&img, &spec, seed).unwrap());
    }
}

#[test]
fn pipeline_output_does_not_depend_on_thread_count() {
    let img = GrayImage::from_fn(VIEW_WIDTH, VIEW_HEIGHT, |x, y| ((x * 7 + y * 3) % 17) as f64 / 17.0);
    let spec = AugmentSpec::default();
    let serial: Vec<GrayImage> = (0..32).map(|s| full_pipeline(&img, &spec, s).unwrap()).collect();
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let parallel: Vec<GrayImage> =
            pool.install(|| (0..32u64).into_par_iter().map(|s| full_pipeline(&img, &spec, s).unwrap()).collect());
        assert_eq!(parallel, serial);
    }
}

#[test]
fn noise_has_the_requested_spread() {
    let img = GrayImage::filled(200, 200, 0.5);
    let noisy = gaussian_noise(&img, 0.01, 42);
    let n = noisy.pixels.len() as f64;
    let mean = noisy.pixels.iter().sum::<f64>() / n;
    let sd = (noisy.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.01).abs() < 0.0005, "{sd}");
}

#[test]
fn full_resolution_view_downscales_to_network_input() {
    let img = GrayImage::from_fn(320, 416, |x, y| (x as f64 / 320.0) * (y as f64 / 416.0));
    let small = lanczos_downscale(&img, 8).unwrap();
    assert_eq!((small.width, small.height), (VIEW_WIDTH, VIEW_HEIGHT));
    assert_eq!(small.width * 416, small.height * 320);
    assert!(lanczos_downscale(&img, 7).is_err());
}
