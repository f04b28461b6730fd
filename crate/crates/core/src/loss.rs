//! Training losses: focal loss, squared error, weighted multi-task
//! composition, and the per-patient triage loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal parameters need alpha > 0 and gamma >= 0, got ({alpha}, {gamma})"
            )));
        }
        Ok(Self { alpha, gamma })
    }

    /// Plain cross-entropy: `alpha = 1`, `gamma = 0`.
    pub fn cross_entropy() -> Self {
        Self { alpha: 1.0, gamma: 0.0 }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Probability assigned to the true class.
pub fn p_t(p: f64, y: bool) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(if y { p } else { 1.0 - p })
}

/// `-alpha * (1 - p_t)^gamma * ln(p_t)`, with `p` clamped to `[eps, 1 - eps]`.
pub fn focal_loss(p: f64, y: bool, fp: FocalParams) -> f64 {
    let pt = if y { clamp_prob(p) } else { 1.0 - clamp_prob(p) };
    -fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

/// Derivative of [`focal_loss`] with respect to `p` (zero where the clamp is active).
pub fn focal_grad(p: f64, y: bool, fp: FocalParams) -> f64 {
    if p < PROB_EPS || p > 1.0 - PROB_EPS {
        return 0.0;
    }
    let pt = if y { p } else { 1.0 - p };
    let q = 1.0 - pt;
    let focus = if fp.gamma == 0.0 { 0.0 } else { fp.gamma * q.powf(fp.gamma - 1.0) * pt.ln() };
    let d_dpt = fp.alpha * (focus - q.powf(fp.gamma) / pt);
    if y {
        d_dpt
    } else {
        -d_dpt
    }
}

pub fn mse(pred: f64, target: f64) -> f64 {
    (pred - target) * (pred - target)
}

pub fn mse_grad(pred: f64, target: f64) -> f64 {
    2.0 * (pred - target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskWeights {
    pub diagnosis: f64,
    pub sign: f64,
    pub suspicion: f64,
    pub conspicuity: f64,
    pub density: f64,
    pub age: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { diagnosis: 1.0, sign: 0.25, suspicion: 0.25, conspicuity: 0.2, density: 0.15, age: 0.15 }
    }
}

impl TaskWeights {
    /// Single-task weighting: every auxiliary weight zero.
    pub fn diagnosis_only() -> Self {
        Self { diagnosis: 1.0, sign: 0.0, suspicion: 0.0, conspicuity: 0.0, density: 0.0, age: 0.0 }
    }

    pub fn aux_sum(&self) -> f64 {
        self.sign + self.suspicion + self.conspicuity + self.density + self.age
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.diagnosis, self.sign, self.suspicion, self.conspicuity, self.density, self.age];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("task weights must be finite and >= 0".into()));
        }
        // small slack so the documented defaults (which sum exactly) pass under rounding
        if self.diagnosis + 1e-12 < self.aux_sum() {
            return Err(Error::DiagnosisWeightDominated);
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            diagnosis: self.diagnosis * k,
            sign: self.sign * k,
            suspicion: self.suspicion * k,
            conspicuity: self.conspicuity * k,
            density: self.density * k,
            age: self.age * k,
        }
    }
}

/// Unweighted loss of each task for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskLosses {
    pub diagnosis: f64,
    pub sign: f64,
    pub suspicion: f64,
    pub conspicuity: f64,
    pub density: f64,
    pub age: f64,
}

pub fn mtl_loss(l: &TaskLosses, w: &TaskWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.diagnosis * l.diagnosis
        + w.sign * l.sign
        + w.suspicion * l.suspicion
        + w.conspicuity * l.conspicuity
        + w.density * l.density
        + w.age * l.age)
}

/// Per-patient triage loss `w + b_r * w * l_r + b_c * (1 - w) * l_c`, where `w`
/// is the probability of sending the patient to the radiologist and
/// `l_r` / `l_c` flag a radiologist / classifier misdiagnosis.
pub fn triage_sample_loss(w: f64, l_r: bool, l_c: bool, b_r: f64, b_c: f64) -> f64 {
    let (lr, lc) = (l_r as u8 as f64, l_c as u8 as f64);
    w + b_r * w * lr + b_c * (1.0 - w) * lc
}

/// `d/dw` of [`triage_sample_loss`]; constant because the loss is affine in `w`.
pub fn triage_sample_grad(l_r: bool, l_c: bool, b_r: f64, b_c: f64) -> f64 {
    1.0 + b_r * (l_r as u8 as f64) - b_c * (l_c as u8 as f64)
}
