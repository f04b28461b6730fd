//! Binary classification metrics.
//!
//! Conventions used throughout the crate:
//! - a sample is predicted positive when `score >= threshold`;
//! - rates with a zero denominator are errors, never silent zeros;
//! - AUPRC is step-wise average precision (no interpolation).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// Adds one prediction/outcome pair.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, a) in pairs {
            c.record(p, a);
        }
        c
    }

    pub fn fnr_fpr(&self) -> Result<(f64, f64)> {
        fnr_fpr(self)
    }

    pub fn f1(&self) -> Result<f64> {
        f1(self)
    }

    pub fn kappa(&self) -> Result<f64> {
        cohen_kappa(self)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

pub fn samples_from(scores: &[f64], labels: &[bool]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(labels)
        .map(|(&score, &label)| ScoredSample { score, label })
        .collect()
}

/// Ordered `(x, y)` points of a ROC or precision-recall curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    /// Trapezoidal area under the polyline.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// Right-step area: each x increment is weighted by the y of its right end.
    pub fn step_area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum()
    }
}

pub fn confusion(samples: &[ScoredSample], threshold: f64) -> Result<ConfusionCounts> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(ConfusionCounts::from_pairs(samples.iter().map(|s| (s.score >= threshold, s.label))))
}

pub fn fnr_fpr(c: &ConfusionCounts) -> Result<(f64, f64)> {
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok((c.fn_ as f64 / c.positives() as f64, c.fp as f64 / c.negatives() as f64))
}

pub fn f1(c: &ConfusionCounts) -> Result<f64> {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Err(Error::F1Undefined);
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

pub fn cohen_kappa(c: &ConfusionCounts) -> Result<f64> {
    let n = c.total();
    if n == 0 {
        return Err(Error::NoSamples);
    }
    let n = n as f64;
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let p_o = (tp + tn) / n;
    let p_e = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
    if p_e >= 1.0 {
        return Err(Error::KappaUndefined);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(Error::InvalidArgument(format!("non-finite score {}", s.score))),
        None => Ok(()),
    }
}

fn by_score_desc(samples: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    sorted
}

/// Cumulative `(tp, fp)` after each block of tied scores, highest score first.
fn threshold_steps(samples: &[ScoredSample]) -> Vec<(u64, u64)> {
    let sorted = by_score_desc(samples);
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    steps
}

/// Mann-Whitney estimate of `P(score_pos > score_neg) + P(tie) / 2`, via midranks.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * sorted[i..j].iter().filter(|s| s.label).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision.
pub fn auprc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let n_pos = samples.iter().filter(|s| s.label).count();
    if n_pos == 0 {
        return Err(Error::AuprcUndefined);
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in threshold_steps(samples) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// ROC curve `(fpr, tpr)` from `(0, 0)` through every distinct score to `(1, 1)`.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Curve> {
    check_finite(samples)?;
    let n_pos = samples.iter().filter(|s| s.label).count() as f64;
    let n_neg = samples.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::AurocUndefined);
    }
    let mut points = vec![(0.0, 0.0)];
    points.extend(
        threshold_steps(samples)
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / n_neg, tp as f64 / n_pos)),
    );
    Ok(Curve { points })
}

/// Precision-recall curve `(recall, precision)`; its [`Curve::step_area`] is the AUPRC.
pub fn pr_curve(samples: &[ScoredSample]) -> Result<Curve> {
    check_finite(samples)?;
    let n_pos = samples.iter().filter(|s| s.label).count() as f64;
    if n_pos == 0.0 {
        return Err(Error::AuprcUndefined);
    }
    let mut points = vec![(0.0, 1.0)];
    points.extend(
        threshold_steps(samples)
            .into_iter()
            .map(|(tp, fp)| (tp as f64 / n_pos, tp as f64 / (tp + fp) as f64)),
    );
    Ok(Curve { points })
}
