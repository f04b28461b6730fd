//! Report tables.
//!
//! Each table is a list of rows that can be written as CSV. Floats are
//! printed with six decimals so reports from identical runs are
//! byte-identical; undefined metrics print as `NaN`.

use std::path::Path;

use serde::Serialize;

use crate::cohort::{PatientRecord, RecallType, Sign, AGE_BINS, NUM_CONSPICUITY};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::triage::{BaselineMetrics, OperatingPoint};

pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Rates and scores of one confusion table; NaN where undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub fnr: f64,
    pub fpr: f64,
    pub kappa: f64,
    pub f1: f64,
}

impl Scores {
    pub fn of(c: &ConfusionCounts) -> Self {
        let (fnr, fpr) = c.fnr_fpr().unwrap_or((f64::NAN, f64::NAN));
        Self { fnr, fpr, kappa: c.kappa().unwrap_or(f64::NAN), f1: c.f1().unwrap_or(f64::NAN) }
    }
}

// ------------------------------------------------------------ comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub system: String,
    pub frac_to_radiologist: f64,
    /// Absent for averaged rows.
    pub counts: Option<ConfusionCounts>,
    pub scores: Scores,
}

impl ComparisonRow {
    pub fn from_counts(system: &str, frac_to_radiologist: f64, counts: ConfusionCounts) -> Self {
        Self { system: system.into(), frac_to_radiologist, counts: Some(counts), scores: Scores::of(&counts) }
    }

    pub fn from_baseline(system: &str, frac_to_radiologist: f64, b: &BaselineMetrics) -> Self {
        Self {
            system: system.into(),
            frac_to_radiologist,
            counts: None,
            scores: Scores { fnr: f64::NAN, fpr: f64::NAN, kappa: b.kappa, f1: b.f1 },
        }
    }
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["system", "frac_to_radiologist", "tp", "tn", "fp", "fn", "fnr", "fpr", "kappa", "f1"])?;
    for r in rows {
        let c = |f: fn(&ConfusionCounts) -> u64| r.counts.as_ref().map(|c| f(c).to_string()).unwrap_or_default();
        w.write_record([
            r.system.clone(),
            fmt_f(r.frac_to_radiologist),
            c(|c| c.tp),
            c(|c| c.tn),
            c(|c| c.fp),
            c(|c| c.fn_),
            fmt_f(r.scores.fnr),
            fmt_f(r.scores.fpr),
            fmt_f(r.scores.kappa),
            fmt_f(r.scores.f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------ operating curve

pub const OPERATING_CURVE_HEADER: [&str; 9] = ["frac_to_radiologist", "fnr", "fpr", "kappa", "f1", "tp", "tn", "fp", "fn"];

pub fn write_operating_curve(path: &Path, points: &[OperatingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(OPERATING_CURVE_HEADER)?;
    for p in points {
        let c = &p.counts;
        w.write_record([
            fmt_f(p.frac_to_radiologist),
            fmt_f(p.fnr),
            fmt_f(p.fpr),
            fmt_f(p.kappa),
            fmt_f(p.f1),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------ strata

/// Stratum labels of one patient, `(group, value)`, including `("all", "all")`.
pub fn strata_of(record: &PatientRecord) -> Vec<(String, String)> {
    let age = AGE_BINS
        .iter()
        .find(|(lo, hi)| (*lo..=*hi).contains(&record.age))
        .map(|(lo, hi)| format!("{lo}-{hi}"))
        .unwrap_or_else(|| "other".into());
    vec![
        ("all".into(), "all".into()),
        ("age".into(), age),
        ("density".into(), DENSITY_LABELS[record.density_bin()].into()),
        ("sign".into(), record.sign.name().into()),
        ("conspicuity".into(), record.conspicuity.to_string()),
        ("family_history".into(), if record.family_history { "yes" } else { "no" }.into()),
        ("recall_type".into(), record.recall_type.name().into()),
    ]
}

const DENSITY_LABELS: [&str; 4] = ["0-24", "25-49", "50-74", "75-100"];

/// Every stratum in report order.
pub fn stratum_order() -> Vec<(String, String)> {
    let mut v = vec![("all".to_string(), "all".to_string())];
    v.extend(AGE_BINS.iter().map(|(lo, hi)| ("age".into(), format!("{lo}-{hi}"))));
    v.extend(DENSITY_LABELS.iter().map(|d| ("density".into(), d.to_string())));
    v.extend(Sign::ALL.iter().map(|s| ("sign".into(), s.name().to_string())));
    v.extend((0..NUM_CONSPICUITY).map(|c| ("conspicuity".into(), c.to_string())));
    v.extend(["no", "yes"].iter().map(|f| ("family_history".into(), f.to_string())));
    v.extend(RecallType::ALL.iter().map(|r| ("recall_type".into(), r.name().to_string())));
    v
}

/// One patient's decisions as the stratified reports see them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPatient {
    pub strata: Vec<(String, String)>,
    pub outcome: bool,
    pub rad: bool,
    /// Classifier's thresholded call.
    pub classifier: bool,
    pub to_radiologist: bool,
    /// Final decision of the combined system.
    pub system: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedRow {
    pub group: String,
    pub stratum: String,
    pub n: usize,
    pub frac_to_radiologist: Option<f64>,
    pub radiologist: Scores,
    pub system: Option<Scores>,
    /// Fractions of R+C+, R+C-, R-C+, R-C- where + means a correct diagnosis.
    pub agreement: [f64; 4],
    pub radiologist_counts: ConfusionCounts,
    pub system_counts: Option<ConfusionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedReport {
    pub rows: Vec<StratifiedRow>,
    /// Strata that had no patients and were left out.
    pub notes: Vec<String>,
}

fn stratified(patients: &[ReportPatient], with_system: bool) -> Result<StratifiedReport> {
    if patients.is_empty() {
        return Err(Error::MissingPredictions("no patients".into()));
    }
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (group, stratum) in stratum_order() {
        let members: Vec<&ReportPatient> =
            patients.iter().filter(|p| p.strata.iter().any(|(g, s)| *g == group && *s == stratum)).collect();
        if members.is_empty() {
            notes.push(format!("{group}={stratum}: no patients, row omitted"));
            continue;
        }
        let n = members.len();
        let rad = ConfusionCounts::from_pairs(members.iter().map(|p| (p.rad, p.outcome)));
        let sys = ConfusionCounts::from_pairs(members.iter().map(|p| (p.system, p.outcome)));
        let mut cells = [0usize; 4];
        for p in &members {
            let r_ok = p.rad == p.outcome;
            let c_ok = p.classifier == p.outcome;
            cells[2 * (!r_ok) as usize + (!c_ok) as usize] += 1;
        }
        let to_rad = members.iter().filter(|p| p.to_radiologist).count();
        rows.push(StratifiedRow {
            group,
            stratum,
            n,
            frac_to_radiologist: with_system.then(|| to_rad as f64 / n as f64),
            radiologist: Scores::of(&rad),
            system: with_system.then(|| Scores::of(&sys)),
            agreement: cells.map(|c| c as f64 / n as f64),
            radiologist_counts: rad,
            system_counts: with_system.then_some(sys),
        });
    }
    Ok(StratifiedReport { rows, notes })
}

/// Radiologist/classifier agreement per stratum.
pub fn agreement_table(patients: &[ReportPatient]) -> Result<StratifiedReport> {
    stratified(patients, false)
}

/// Radiologist workload and combined-system scores per stratum.
pub fn workload_table(patients: &[ReportPatient]) -> Result<StratifiedReport> {
    stratified(patients, true)
}

pub fn write_stratified(path: &Path, report: &StratifiedReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "group",
        "stratum",
        "n",
        "frac_to_radiologist",
        "radiologist_kappa",
        "radiologist_f1",
        "system_kappa",
        "system_f1",
        "r_pos_c_pos",
        "r_pos_c_neg",
        "r_neg_c_pos",
        "r_neg_c_neg",
    ])?;
    for r in &report.rows {
        let mut rec = vec![
            r.group.clone(),
            r.stratum.clone(),
            r.n.to_string(),
            fmt_opt(r.frac_to_radiologist),
            fmt_f(r.radiologist.kappa),
            fmt_f(r.radiologist.f1),
            fmt_opt(r.system.map(|s| s.kappa)),
            fmt_opt(r.system.map(|s| s.f1)),
        ];
        rec.extend(r.agreement.iter().map(|&a| fmt_f(a)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------ density variance

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub group: String,
    pub n: usize,
    pub mean_variance: f64,
}

/// Mean cross-view density variance by classifier call and by outcome.
pub fn density_variance_table(variances: &[f64], classifier_positive: &[bool], outcome: &[bool]) -> Result<Vec<VarianceRow>> {
    if variances.len() != classifier_positive.len() || variances.len() != outcome.len() {
        return Err(Error::DimensionMismatch { expected: variances.len(), got: classifier_positive.len().min(outcome.len()) });
    }
    let mean_where = |name: &str, mask: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = (0..variances.len()).filter(|&i| mask(i)).map(|i| variances[i]).collect();
        VarianceRow {
            group: name.into(),
            n: v.len(),
            mean_variance: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
        }
    };
    Ok(vec![
        mean_where("classifier_positive", &|i| classifier_positive[i]),
        mean_where("classifier_negative", &|i| !classifier_positive[i]),
        mean_where("malignant", &|i| outcome[i]),
        mean_where("benign", &|i| !outcome[i]),
    ])
}

pub fn write_variance(path: &Path, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "n", "mean_density_variance"])?;
    for r in rows {
        w.write_record([r.group.clone(), r.n.to_string(), fmt_f(r.mean_variance)])?;
    }
    w.flush()?;
    Ok(())
}
