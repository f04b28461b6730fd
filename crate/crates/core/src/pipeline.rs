//! End-to-end experiment stages.
//!
//! Each stage reads the artifacts of its predecessors from the output
//! directory and writes its own. Only [`evaluate`] and [`report`] touch the
//! holdout patients.
//!
//! | stage            | reads                                   | writes |
//! |------------------|-----------------------------------------|--------|
//! | generate         | config                                  | `cohort.csv`, `images/`, `partition.json` |
//! | train-mtl        | cohort, partition                       | `mtl.json` |
//! | train-classifier | cohort, partition, `mtl.json`           | `mtos.json`, `classifier.json` |
//! | train-triage     | cohort, partition, mtos, classifier     | `policy.json`, `triage_net.json`, `triage_candidates.csv` |
//! | sweep            | policy and the validation split         | `sweep.csv`, `operating_curve_validation.csv` |
//! | evaluate         | all models and the holdout              | `mtos_holdout.json`, `comparison.csv`, `operating_curve.csv`, `summary.json` |
//! | report           | evaluation artifacts                    | `agreement.csv`, `workload.csv`, `density_variance.csv`, `operating_curve.svg`, `saliency.svg` |

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{generate_cohort, load_cohort, partition, save_cohort, Partition, PatientRecord, View};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    classify, density_variance, fusion_inputs, saliency, train_classifier, ClassifierNet, FusionExample, FusionInput,
    SaliencySpec,
};
use crate::imageproc::{dataset_standardization, GrayImage};
use crate::metrics::{auroc, ConfusionCounts, ScoredSample};
use crate::mtlnet::{normalize_age, train, MtlLabels, MtlNet, ViewExample};
use crate::persist::{self, ClassifierModel, Component, MtlModel, PolicyModel};
use crate::plot::{plot_operating_curve, plot_saliency};
use crate::report::{
    agreement_table, density_variance_table, fmt_f, strata_of, workload_table, write_comparison, write_operating_curve,
    write_stratified, write_variance, ComparisonRow, ReportPatient,
};
use crate::rng::derive;
use crate::triage::{
    classifier_confusion, operating_curve, radiologist_confusion, random_baseline, routes_to_radiologist,
    system_confusion, train_triage, TriageCase, TriageNet, CLASSIFIER_ERROR_THRESHOLD,
};

pub const COHORT_CSV: &str = "cohort.csv";
pub const PARTITION_JSON: &str = "partition.json";
pub const MTL_JSON: &str = "mtl.json";
pub const MTOS_JSON: &str = "mtos.json";
pub const MTOS_HOLDOUT_JSON: &str = "mtos_holdout.json";
pub const CLASSIFIER_JSON: &str = "classifier.json";
pub const POLICY_JSON: &str = "policy.json";
pub const TRIAGE_NET_JSON: &str = "triage_net.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const LOCK_FILE: &str = ".lock";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Output directory plus the configuration every stage runs under.
#[derive(Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    _lock: OutputLock,
}

/// Partition stored by patient id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionIds {
    pub holdout: Vec<String>,
    pub stage1: Vec<String>,
    pub stage2: Vec<String>,
    pub stage3: Vec<String>,
    pub validation: Vec<String>,
}

impl PartitionIds {
    fn from_indices(p: &Partition, records: &[PatientRecord]) -> Self {
        let ids = |v: &[usize]| v.iter().map(|&i| records[i].id.clone()).collect();
        Self {
            holdout: ids(&p.holdout),
            stage1: ids(&p.stage1),
            stage2: ids(&p.stage2),
            stage3: ids(&p.stage3),
            validation: ids(&p.validation),
        }
    }
}

/// Loaded cohort with id lookup.
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub parts: PartitionIds,
    index: BTreeMap<String, usize>,
}

impl Cohort {
    pub fn get(&self, id: &str) -> Result<&PatientRecord> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::MissingPredictions(format!("patient {id} not in cohort")))
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&PatientRecord>> {
        ids.iter().map(|id| self.get(id)).collect()
    }
}

/// Outcome of `train-triage`: whether the selected policy is the trivial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriageStatus {
    Reduced,
    ConstraintBound,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(require(path.to_path_buf())?)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

impl Run {
    /// Locks `out` and writes the resolved configuration into it.
    pub fn open(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let lock = OutputLock::acquire(out)?;
        std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
        Ok(Self { cfg, out: out.to_path_buf(), _lock: lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_model<T: Component>(&self, name: &str) -> Result<T> {
        persist::load(&self.path(name))
    }

    pub fn load_cohort(&self) -> Result<Cohort> {
        let records = load_cohort(&require(self.path(COHORT_CSV))?)?;
        let parts: PartitionIds = read_json(&self.path(PARTITION_JSON))?;
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Cohort { records, parts, index })
    }

    pub fn generate(&self) -> Result<()> {
        let c = &self.cfg;
        let records = generate_cohort(c.cohort.n, &c.cohort.strata, &c.reader_profile(), c.cohort_seed())?;
        let p = partition(records.len(), &c.split_spec())?;
        save_cohort(&self.path(COHORT_CSV), &records)?;
        write_json(&self.path(PARTITION_JSON), &PartitionIds::from_indices(&p, &records))
    }

    pub fn train_mtl(&self) -> Result<MtlModel> {
        let cohort = self.load_cohort()?;
        let model = train_mtl_on(&self.cfg, &cohort)?;
        persist::save(&self.path(MTL_JSON), &model)?;
        Ok(model)
    }

    pub fn train_classifier(&self) -> Result<ClassifierModel> {
        let cohort = self.load_cohort()?;
        let mtl: MtlModel = self.load_model(MTL_JSON)?;
        let p = &cohort.parts;
        let ids: Vec<String> = p.stage2.iter().chain(&p.stage3).chain(&p.validation).cloned().collect();
        let mtos = compute_mtos(&self.cfg, &mtl, &cohort, &ids)?;
        write_json(&self.path(MTOS_JSON), &mtos)?;
        let model = train_classifier_on(&self.cfg, &cohort, &mtos)?;
        persist::save(&self.path(CLASSIFIER_JSON), &model)?;
        Ok(model)
    }

    pub fn train_triage(&self) -> Result<(PolicyModel, TriageStatus)> {
        let cohort = self.load_cohort()?;
        let mtos: BTreeMap<String, FusionInput> = read_json(&self.path(MTOS_JSON))?;
        let clf: ClassifierModel = self.load_model(CLASSIFIER_JSON)?;
        let train_cases = triage_cases(&cohort, &cohort.parts.stage3, &mtos, &clf.net)?;
        let val_cases = triage_cases(&cohort, &cohort.parts.validation, &mtos, &clf.net)?;
        let outcome = train_triage(&train_cases, &val_cases, &self.cfg.triage)?;
        let model = PolicyModel { policy: outcome.policy, candidates: outcome.candidates };
        persist::save(&self.path(POLICY_JSON), &model)?;
        persist::save(&self.path(TRIAGE_NET_JSON), &TriageNetModel(model.policy.net.clone()))?;
        write_candidates(&self.path("triage_candidates.csv"), &model)?;
        let status = if model.policy.constraint_bound { TriageStatus::ConstraintBound } else { TriageStatus::Reduced };
        Ok((model, status))
    }

    /// Validation-split operating curve of the selected policy and the grid summary.
    pub fn sweep(&self) -> Result<()> {
        let cohort = self.load_cohort()?;
        let mtos: BTreeMap<String, FusionInput> = read_json(&self.path(MTOS_JSON))?;
        let clf: ClassifierModel = self.load_model(CLASSIFIER_JSON)?;
        let policy: PolicyModel = self.load_model(POLICY_JSON)?;
        let val_cases = triage_cases(&cohort, &cohort.parts.validation, &mtos, &clf.net)?;
        write_operating_curve(&self.path("operating_curve_validation.csv"), &operating_curve(&policy.policy, &val_cases)?)?;
        write_candidates(&self.path("sweep.csv"), &policy)
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let cohort = self.load_cohort()?;
        let mtl: MtlModel = self.load_model(MTL_JSON)?;
        let clf: ClassifierModel = self.load_model(CLASSIFIER_JSON)?;
        let policy: PolicyModel = self.load_model(POLICY_JSON)?;
        let mtos = compute_mtos(&self.cfg, &mtl, &cohort, &cohort.parts.holdout)?;
        write_json(&self.path(MTOS_HOLDOUT_JSON), &mtos)?;
        let cases = triage_cases(&cohort, &cohort.parts.holdout, &mtos, &clf.net)?;
        let ev = evaluate_cases(&self.cfg, &policy, &cases, &mtos)?;
        let points = operating_curve(&policy.policy, &cases)?;
        write_operating_curve(&self.path("operating_curve.csv"), &points)?;
        write_comparison(&self.path("comparison.csv"), &ev.comparison)?;
        std::fs::write(self.path("summary.json"), summary_json(&ev)?)?;
        Ok(ev)
    }

    pub fn report(&self) -> Result<()> {
        let cohort = self.load_cohort()?;
        let mtl: MtlModel = self.load_model(MTL_JSON)?;
        let clf: ClassifierModel = self.load_model(CLASSIFIER_JSON)?;
        let policy: PolicyModel = self.load_model(POLICY_JSON)?;
        let mtos: BTreeMap<String, FusionInput> = read_json(&self.path(MTOS_HOLDOUT_JSON))?;
        let cases = triage_cases(&cohort, &cohort.parts.holdout, &mtos, &clf.net)?;
        let ws = policy.policy.scores(&cases)?;
        let records = cohort.select(&cohort.parts.holdout)?;
        let pol = &policy.policy;
        let patients: Vec<ReportPatient> = records
            .iter()
            .zip(&cases)
            .zip(&ws)
            .map(|((r, c), &w)| {
                let to_rad = routes_to_radiologist(w, pol.alpha);
                let classifier = c.prob >= pol.beta;
                ReportPatient {
                    strata: strata_of(r),
                    outcome: c.outcome,
                    rad: c.rad,
                    classifier,
                    to_radiologist: to_rad,
                    system: if to_rad { c.rad } else { classifier },
                }
            })
            .collect();
        write_stratified(&self.path("agreement.csv"), &agreement_table(&patients)?)?;
        write_stratified(&self.path("workload.csv"), &workload_table(&patients)?)?;

        let variances: Vec<f64> = cohort.parts.holdout.iter().map(|id| density_variance(mtos[id].views())).collect();
        let positive: Vec<bool> = cases.iter().map(|c| c.prob >= CLASSIFIER_ERROR_THRESHOLD).collect();
        let outcome: Vec<bool> = cases.iter().map(|c| c.outcome).collect();
        write_variance(&self.path("density_variance.csv"), &density_variance_table(&variances, &positive, &outcome)?)?;

        let points = operating_curve(pol, &cases)?;
        std::fs::write(self.path("operating_curve.svg"), plot_operating_curve(&points)?)?;

        // saliency of the most suspicious view of the highest-scoring malignant holdout patient
        let (i, _) = cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.outcome)
            .max_by(|a, b| a.1.prob.total_cmp(&b.1.prob).then(b.0.cmp(&a.0)))
            .or_else(|| cases.iter().enumerate().next())
            .ok_or(Error::EmptyInput)?;
        let record = records[i];
        let fi = &mtos[&record.id];
        let (v, _) = fi
            .views()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.malignancy().total_cmp(&b.1.malignancy()).then(b.0.cmp(&a.0)))
            .expect("four views");
        let img: GrayImage = record.view(View::ALL[v]).to_gray();
        let heat = saliency(&mtl.net, &img, &mtl.augment, &SaliencySpec::default())?;
        std::fs::write(self.path("saliency.svg"), plot_saliency(&heat, &img)?)?;
        Ok(())
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<(Evaluation, TriageStatus)> {
        self.generate()?;
        self.train_mtl()?;
        self.train_classifier()?;
        let (_, status) = self.train_triage()?;
        self.sweep()?;
        let ev = self.evaluate()?;
        self.report()?;
        Ok((ev, status))
    }
}

/// The triage network on its own, for inspection outside the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageNetModel(pub TriageNet);

impl Component for TriageNetModel {
    const TAG: &'static str = "triage_net";
    fn check(&self) -> Result<()> {
        self.0.validate()
    }
}

fn write_candidates(path: &Path, model: &PolicyModel) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["b_r", "b_c", "alpha", "beta", "to_radiologist", "tp", "tn", "fp", "fn"])?;
    for c in &model.candidates {
        let k = &c.choice.counts;
        w.write_record([
            fmt_f(c.b_r),
            fmt_f(c.b_c),
            fmt_f(c.choice.alpha),
            fmt_f(c.choice.beta),
            c.choice.to_radiologist.to_string(),
            k.tp.to_string(),
            k.tn.to_string(),
            k.fp.to_string(),
            k.fn_.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-view training labels. The annotation is per patient, so every view of
/// a patient carries the patient's diagnosis and findings; density is per view.
pub fn view_labels(r: &PatientRecord, v: View) -> MtlLabels {
    MtlLabels {
        diagnosis: r.outcome,
        sign: r.sign.index(),
        suspicion: r.suspicion,
        conspicuity: r.conspicuity,
        density: r.densities[v as usize] / 100.0,
        age: normalize_age(r.age as f64),
    }
}

pub fn view_examples<'a>(records: &[&'a PatientRecord]) -> Vec<ViewExample<'a>> {
    records
        .iter()
        .flat_map(|r| View::ALL.map(|v| ViewExample { image: r.view(v), labels: view_labels(r, v) }))
        .collect()
}

pub fn train_mtl_on(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<MtlModel> {
    let m = &cfg.mtl;
    let train_set = view_examples(&cohort.select(&cohort.parts.stage1)?);
    let val_set = view_examples(&cohort.select(&cohort.parts.validation)?);
    let mut augment = m.augment.clone();
    if m.dataset_standardization {
        let grays: Vec<GrayImage> = train_set.iter().map(|e| e.image.to_gray()).collect();
        augment.standardization = dataset_standardization(grays.iter(), &augment)?;
    }
    let net = MtlNet::init(m.arch.clone(), derive(m.schedule.seed, &[0]))?;
    let (net, history) = train(net, &train_set, &val_set, &m.schedule, m.weights, m.focal, &augment)?;
    Ok(MtlModel { net, augment, schedule: m.schedule.clone(), weights: m.weights, focal: m.focal, history })
}

pub fn compute_mtos(
    cfg: &ExperimentConfig,
    mtl: &MtlModel,
    cohort: &Cohort,
    ids: &[String],
) -> Result<BTreeMap<String, FusionInput>> {
    let records = cohort.select(ids)?;
    let inputs = fusion_inputs(&mtl.net, &records, &mtl.augment, cfg.mtl.tta, cfg.mto_seed())?;
    Ok(ids.iter().cloned().zip(inputs).collect())
}

fn lookup<'a>(mtos: &'a BTreeMap<String, FusionInput>, id: &str) -> Result<&'a FusionInput> {
    mtos.get(id).ok_or_else(|| Error::MissingPredictions(format!("no MTOs for patient {id}")))
}

pub fn fusion_examples(cohort: &Cohort, ids: &[String], mtos: &BTreeMap<String, FusionInput>) -> Result<Vec<FusionExample>> {
    ids.iter()
        .map(|id| Ok(FusionExample { id: id.clone(), input: *lookup(mtos, id)?, label: cohort.get(id)?.outcome }))
        .collect()
}

pub fn train_classifier_on(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    mtos: &BTreeMap<String, FusionInput>,
) -> Result<ClassifierModel> {
    let c = &cfg.classifier;
    let train_set = fusion_examples(cohort, &cohort.parts.stage2, mtos)?;
    let val_set = fusion_examples(cohort, &cohort.parts.validation, mtos)?;
    let net = ClassifierNet::init(c.arch.clone(), derive(c.schedule.seed, &[0]))?;
    let (net, history) = train_classifier(
        net,
        &train_set,
        &val_set,
        cohort.parts.stage1.iter().map(String::as_str),
        &c.schedule,
        c.focal,
    )?;
    Ok(ClassifierModel { net, schedule: c.schedule.clone(), focal: c.focal, history })
}

pub fn triage_cases(
    cohort: &Cohort,
    ids: &[String],
    mtos: &BTreeMap<String, FusionInput>,
    clf: &ClassifierNet,
) -> Result<Vec<TriageCase>> {
    ids.iter()
        .map(|id| {
            let fi = lookup(mtos, id)?;
            let r = cohort.get(id)?;
            Ok(TriageCase::new(id.clone(), fi, classify(clf, fi)?, r.rad_diagnosis, r.outcome))
        })
        .collect()
}

/// Test-split results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub n: usize,
    pub to_radiologist: usize,
    pub frac_to_radiologist: f64,
    pub constraint_bound: bool,
    pub system: ConfusionCounts,
    pub radiologist: ConfusionCounts,
    pub classifier: ConfusionCounts,
    pub comparison: Vec<ComparisonRow>,
    /// Patient-level AUROC of the fusion classifier.
    pub classifier_auroc: f64,
    /// AUROC of each single view's malignancy output used as the patient score.
    pub view_auroc: [f64; 4],
}

pub fn evaluate_cases(
    cfg: &ExperimentConfig,
    policy: &PolicyModel,
    cases: &[TriageCase],
    mtos: &BTreeMap<String, FusionInput>,
) -> Result<Evaluation> {
    let pol = &policy.policy;
    let ws = pol.scores(cases)?;
    let to_rad = ws.iter().filter(|&&w| routes_to_radiologist(w, pol.alpha)).count();
    let n = cases.len();
    let frac = to_rad as f64 / n as f64;
    let system = system_confusion(pol, cases)?;
    let radiologist = radiologist_confusion(cases);
    let classifier = classifier_confusion(cases, pol.beta);
    let baseline = random_baseline(cases, to_rad, pol.beta, cfg.report.baseline_draws, cfg.baseline_seed())?;
    let comparison = vec![
        ComparisonRow::from_counts("radiologist", 1.0, radiologist),
        ComparisonRow::from_counts("classifier", 0.0, classifier),
        ComparisonRow::from_counts("system", frac, system),
        ComparisonRow::from_baseline("random_allocation", frac, &baseline),
    ];
    let labels: Vec<bool> = cases.iter().map(|c| c.outcome).collect();
    let score_auroc = |scores: Vec<f64>| -> Result<f64> {
        let s: Vec<ScoredSample> = scores.iter().zip(&labels).map(|(&s, &l)| ScoredSample::new(s, l)).collect();
        auroc(&s)
    };
    let classifier_auroc = score_auroc(cases.iter().map(|c| c.prob).collect())?;
    let mut view_auroc = [0.0; 4];
    for (v, slot) in view_auroc.iter_mut().enumerate() {
        *slot = score_auroc(cases.iter().map(|c| Ok(lookup(mtos, &c.id)?.views()[v].malignancy())).collect::<Result<_>>()?)?;
    }
    Ok(Evaluation {
        n,
        to_radiologist: to_rad,
        frac_to_radiologist: frac,
        constraint_bound: pol.constraint_bound,
        system,
        radiologist,
        classifier,
        comparison,
        classifier_auroc,
        view_auroc,
    })
}

fn summary_json(ev: &Evaluation) -> Result<String> {
    // serde_json writes non-finite floats as null
    Ok(serde_json::to_string_pretty(ev)? + "\n")
}
