use std::path::{Path, PathBuf};

use proptest::prelude::*;

use deferral_core::cohort::{
    bright_fraction, generate_cohort, load_cohort, partition, sample_population, save_cohort, RecallType, ReaderProfile,
    Sign, SplitSpec, StrataConfig, View,
};
use deferral_core::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cohort").join(name)
}

#[test]
fn fixture_loads_field_by_field() {
    let rows = load_cohort(&fixture("cohort.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    let p = &rows[1];
    assert_eq!(p.id, "P000002");
    assert_eq!((p.age, p.family_history, p.recall_type), (67, true, RecallType::Arbitration));
    assert_eq!(p.densities, [61.0, 80.5, 59.0, 77.0]);
    assert_eq!((p.sign, p.suspicion, p.conspicuity), (Sign::Spiculated, 4, 3));
    assert!(p.outcome && p.rad_diagnosis);
    assert_eq!((p.view(View::CcL).width, p.view(View::CcL).height), (4, 4));
    assert_eq!(p.view(View::MloR).pixels[0], 64);
    assert!(!rows[2].outcome && rows[2].rad_diagnosis);
}

#[test]
fn fixture_survives_a_save_and_reload() {
    let rows = load_cohort(&fixture("cohort.csv")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cohort.csv");
    save_cohort(&out, &rows).unwrap();
    assert_eq!(load_cohort(&out).unwrap(), rows);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), std::fs::read_to_string(fixture("cohort.csv")).unwrap());
}

#[test]
fn malformed_fixtures_name_the_problem() {
    match load_cohort(&fixture("bad_recall.csv")) {
        Err(Error::MalformedRow { line, msg }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("recall_type"), "{msg}");
        }
        other => panic!("expected a malformed row, got {other:?}"),
    }
    assert!(matches!(load_cohort(&fixture("missing_column.csv")), Err(Error::MissingColumn(c)) if c == "rad_diagnosis"));
}

#[test]
fn generated_cohort_round_trips_through_disk() {
    let cfg = StrataConfig::default();
    let rows = generate_cohort(12, &cfg, &ReaderProfile::default_for(&cfg), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cohort.csv");
    save_cohort(&out, &rows).unwrap();
    assert_eq!(load_cohort(&out).unwrap(), rows);
}

fn three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn prevalence_and_marginals_follow_the_config() {
    let cfg = StrataConfig::default();
    let n = 20_000;
    let pop = sample_population(n, &cfg, &ReaderProfile::default_for(&cfg), 11).unwrap();
    let malignant = pop.iter().filter(|(t, _)| t.malignant).count();
    assert!((malignant as f64 / n as f64 - cfg.prevalence).abs() < three_sigma(cfg.prevalence, n));

    let cancers: Vec<_> = pop.iter().filter(|(t, _)| t.malignant).collect();
    for (bin, &p) in cfg.density.cancer.iter().enumerate() {
        let k = cancers.iter().filter(|(t, _)| (t.base_density / 25.0).floor() as usize == bin).count();
        assert!((k as f64 / cancers.len() as f64 - p).abs() < three_sigma(p, cancers.len()), "density bin {bin}");
    }
    for (bin, &p) in cfg.age.total.iter().enumerate() {
        let (lo, hi) = deferral_core::cohort::AGE_BINS[bin];
        let k = pop.iter().filter(|(t, _)| (lo..=hi).contains(&t.age)).count();
        assert!((k as f64 / n as f64 - p).abs() < three_sigma(p, n), "age bin {bin}");
    }
}

#[test]
fn simulated_reader_converges_to_its_rates() {
    let cfg = StrataConfig::default();
    let profile = ReaderProfile::uniform(0.2, 0.05);
    let n = 100_000;
    let pop = sample_population(n, &cfg, &profile, 5).unwrap();
    let pos: Vec<_> = pop.iter().filter(|(t, _)| t.malignant).collect();
    let neg: Vec<_> = pop.iter().filter(|(t, _)| !t.malignant).collect();
    let fnr = pos.iter().filter(|(_, r)| !r.diagnosis).count() as f64 / pos.len() as f64;
    let fpr = neg.iter().filter(|(_, r)| r.diagnosis).count() as f64 / neg.len() as f64;
    assert!((fnr - 0.2).abs() < three_sigma(0.2, pos.len()), "fnr {fnr}");
    assert!((fpr - 0.05).abs() < three_sigma(0.05, neg.len()), "fpr {fpr}");
}

#[test]
fn calibrated_reader_hits_the_aggregate_rates() {
    let cfg = StrataConfig::default();
    let profile = ReaderProfile::default_for(&cfg);
    let n = 100_000;
    let pop = sample_population(n, &cfg, &profile, 6).unwrap();
    let (efnr, efpr) = profile.expected_rates(&cfg).unwrap();
    let pos: Vec<_> = pop.iter().filter(|(t, _)| t.malignant).collect();
    let neg: Vec<_> = pop.iter().filter(|(t, _)| !t.malignant).collect();
    let fnr = pos.iter().filter(|(_, r)| !r.diagnosis).count() as f64 / pos.len() as f64;
    let fpr = neg.iter().filter(|(_, r)| r.diagnosis).count() as f64 / neg.len() as f64;
    assert!((fnr - efnr).abs() < three_sigma(efnr, pos.len()), "fnr {fnr} vs {efnr}");
    assert!((fpr - efpr).abs() < three_sigma(efpr, neg.len()), "fpr {fpr} vs {efpr}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            r[k] = (i + j - 1) as f64 / 2.0;
        }
        i = j;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn bright_fraction_tracks_density() {
    let cfg = StrataConfig::default();
    let mut profile = ReaderProfile::default_for(&cfg);
    profile.density_noise = 0.0;
    let rows = generate_cohort(300, &cfg, &profile, 8).unwrap();
    let (mut frac, mut dens) = (Vec::new(), Vec::new());
    for r in &rows {
        for v in View::ALL {
            frac.push(bright_fraction(&r.view(v).to_gray()));
            dens.push(r.densities[v as usize]);
        }
    }
    let rho = pearson(&ranks(&frac), &ranks(&dens));
    assert!(rho > 0.9, "rank correlation {rho}");
}

#[test]
fn generation_is_seeded() {
    let cfg = StrataConfig::default();
    let p = ReaderProfile::default_for(&cfg);
    let a = generate_cohort(20, &cfg, &p, 1).unwrap();
    assert_eq!(a, generate_cohort(20, &cfg, &p, 1).unwrap());
    assert_ne!(a, generate_cohort(20, &cfg, &p, 2).unwrap());
}

#[test]
fn standard_partition_sizes() {
    let p = partition(8162, &SplitSpec::default()).unwrap();
    assert_eq!(p.sizes(), [1000, 4298, 1074, 1074, 716]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_disjoint_covering_and_seeded(n in 60usize..3000, seed in any::<u64>()) {
        let spec = SplitSpec { holdout: n / 10, seed, ..SplitSpec::default() };
        let p = partition(n, &spec).unwrap();
        let mut all: Vec<usize> = p.parts().iter().flat_map(|s| s.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(p.holdout.len(), n / 10);
        prop_assert_eq!(&p, &partition(n, &spec).unwrap());
    }
}
