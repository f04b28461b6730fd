use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use deferral_core::cohort::{image_path, View};
use deferral_core::config::{smoke_config, ExperimentConfig};
use deferral_core::fusion::FusionInput;
use deferral_core::imageproc::ImageU8;
use deferral_core::persist::{self, ClassifierModel, PolicyModel};
use deferral_core::pipeline::{
    evaluate_cases, triage_cases, Run, CLASSIFIER_JSON, MTOS_HOLDOUT_JSON, MTOS_JSON, POLICY_JSON,
};
use deferral_core::Error;

const REPORTS: [&str; 9] = [
    "comparison.csv",
    "operating_curve.csv",
    "operating_curve_validation.csv",
    "sweep.csv",
    "triage_candidates.csv",
    "agreement.csv",
    "workload.csv",
    "density_variance.csv",
    "cohort.csv",
];
const MODELS: [&str; 4] = ["mtl.json", "classifier.json", "policy.json", "triage_net.json"];

fn run_in(dir: &Path, threads: usize) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| Run::open(smoke_config(7), dir).unwrap().run_all().unwrap());
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn full_run_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_in(a.path(), 1);
    run_in(b.path(), 3);
    for name in REPORTS.iter().chain(&MODELS).chain(&["summary.json", "operating_curve.svg", "saliency.svg"]) {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
    assert!(!a.path().join(".lock").exists());
}

#[test]
fn radiologist_only_policy_reproduces_the_radiologist_row() {
    let dir = tempfile::tempdir().unwrap();
    run_in(dir.path(), 1);
    let run = Run::open(smoke_config(7), dir.path()).unwrap();
    let cohort = run.load_cohort().unwrap();
    let clf: ClassifierModel = persist::load(&run.path(CLASSIFIER_JSON)).unwrap();
    let mut policy: PolicyModel = persist::load(&run.path(POLICY_JSON)).unwrap();
    let mtos: BTreeMap<String, FusionInput> =
        serde_json::from_slice(&read(dir.path(), MTOS_HOLDOUT_JSON)).unwrap();
    let cases = triage_cases(&cohort, &cohort.parts.holdout, &mtos, &clf.net).unwrap();
    policy.policy.alpha = 0.0;
    let ev = evaluate_cases(&run.cfg, &policy, &cases, &mtos).unwrap();
    assert_eq!(ev.to_radiologist, ev.n);
    assert_eq!(ev.system, ev.radiologist);
    let rows: BTreeMap<&str, _> = ev.comparison.iter().map(|r| (r.system.as_str(), r)).collect();
    assert_eq!(rows["system"].counts, rows["radiologist"].counts);
    assert_eq!(rows["system"].scores, rows["radiologist"].scores);
}

#[test]
fn training_never_reads_the_holdout() {
    let clean = tempfile::tempdir().unwrap();
    let tampered = tempfile::tempdir().unwrap();
    let stages = |dir: &Path, tamper: bool| {
        let run = Run::open(smoke_config(7), dir).unwrap();
        run.generate().unwrap();
        if tamper {
            let cohort = run.load_cohort().unwrap();
            for id in &cohort.parts.holdout {
                for v in View::ALL {
                    let p: PathBuf = dir.join(image_path(id, v));
                    let img = ImageU8::load_pgm(&p).unwrap();
                    let inverted = ImageU8 { pixels: img.pixels.iter().map(|&x| 255 - x).collect(), ..img };
                    inverted.save_pgm(&p).unwrap();
                }
            }
        }
        run.train_mtl().unwrap();
        let per_view = read(dir, "mtl.json");
        run.train_classifier().unwrap();
        assert_eq!(read(dir, "mtl.json"), per_view, "fusion training touched the per-view model");
        run.train_triage().unwrap();
        run.sweep().unwrap();
        run.load_cohort().unwrap().parts.holdout
    };
    let holdout = stages(clean.path(), false);
    stages(tampered.path(), true);
    for name in MODELS.iter().chain(&[MTOS_JSON, "sweep.csv", "operating_curve_validation.csv"]) {
        assert_eq!(read(clean.path(), name), read(tampered.path(), name), "{name} depends on the holdout");
    }
    let mtos: BTreeMap<String, FusionInput> = serde_json::from_slice(&read(clean.path(), MTOS_JSON)).unwrap();
    assert!(holdout.iter().all(|id| !mtos.contains_key(id)));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(smoke_config(7), dir.path()).unwrap();
    assert!(matches!(run.train_mtl(), Err(Error::MissingArtifact(_))));
    assert!(matches!(run.evaluate(), Err(Error::MissingArtifact(_))));
    assert!(matches!(run.report(), Err(Error::MissingArtifact(_))));
}

#[test]
fn output_directory_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let first = Run::open(smoke_config(7), dir.path()).unwrap();
    assert!(matches!(Run::open(smoke_config(7), dir.path()), Err(Error::Locked(_))));
    drop(first);
    Run::open(smoke_config(7), dir.path()).unwrap();
}

#[test]
fn resolved_config_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(smoke_config(7), dir.path()).unwrap();
    let reloaded = ExperimentConfig::load(&dir.path().join("config.resolved.toml")).unwrap();
    assert_eq!(reloaded, run.cfg);
}

#[test]
fn shipped_smoke_config_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), smoke_config(7).resolved().unwrap());
}
