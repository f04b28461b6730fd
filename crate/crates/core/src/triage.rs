//! Human/machine triage.
//!
//! A triage network scores each patient with `w`, the probability that the
//! radiologist must read the case. Patients with `w >= alpha` take the
//! radiologist's diagnosis; the rest take the classifier's, thresholded at
//! `beta`. Training picks, over a grid of loss weights `(b_r, b_c)` and all
//! thresholds, the policy that sends the fewest patients to the radiologist
//! while keeping false negatives and false positives on the validation split
//! no higher than the radiologist's own.

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionInput, FUSION_DIM};
use crate::loss::{triage_sample_grad, triage_sample_loss};
use crate::metrics::ConfusionCounts;
use crate::nn::{sigmoid, Grads, InputScaling, Mlp, OptimizerSpec};
use crate::rng::{self, derive};

pub const TRIAGE_DIM: usize = FUSION_DIM + 1;

/// Upper bound on `w`, so that `alpha = 1` never routes anyone to the radiologist.
pub const MAX_W: f64 = 1.0 - f64::EPSILON;

/// A classifier probability at or above this counts as a positive call when
/// deciding whether the classifier got a training patient right.
pub const CLASSIFIER_ERROR_THRESHOLD: f64 = 0.5;

/// Non-imaging features, then the four MTOs, then the classifier probability.
pub fn triage_features(fi: &FusionInput, classifier_prob: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(TRIAGE_DIM);
    v.extend(fi.nonimaging.to_vec());
    for m in fi.views() {
        v.extend(m.to_vec());
    }
    v.push(classifier_prob);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageArch {
    pub hidden: Vec<usize>,
}

impl Default for TriageArch {
    fn default() -> Self {
        Self { hidden: vec![64, 32] }
    }
}

impl TriageArch {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![TRIAGE_DIM];
        s.extend(&self.hidden);
        s.push(1);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageNet {
    pub arch: TriageArch,
    pub mlp: Mlp,
    pub seed: u64,
}

impl TriageNet {
    pub fn init(arch: TriageArch, seed: u64) -> Result<Self> {
        let mlp = Mlp::new(&arch.layer_sizes(), 0.0, &mut rng::rng(seed))?;
        Ok(Self { arch, mlp, seed })
    }

    pub fn zeros(arch: TriageArch) -> Self {
        let mlp = Mlp::zeros(&arch.layer_sizes());
        Self { arch, mlp, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp.sizes() != self.arch.layer_sizes() {
            return Err(Error::InvalidArchitecture(format!(
                "weights {:?} do not match architecture {:?}",
                self.mlp.sizes(),
                self.arch.layer_sizes()
            )));
        }
        if !self.mlp.is_finite() {
            return Err(Error::InvalidArchitecture("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(x)?.column(0).iter().map(|&z| sigmoid(z).min(MAX_W)).collect())
    }

    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.forward_batch(x)?[0])
    }

    /// Mean triage loss over a batch and its gradients.
    pub fn loss_and_grads(&self, x: ArrayView2<f64>, l_r: &[bool], l_c: &[bool], b_r: f64, b_c: f64) -> Result<(f64, Grads)> {
        if l_r.len() != x.nrows() || l_c.len() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: l_r.len().min(l_c.len()) });
        }
        let trace = self.mlp.forward_train(x, None)?;
        let b = x.nrows() as f64;
        let mut d = Array2::zeros(trace.logits.raw_dim());
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let w = sigmoid(trace.logits[[i, 0]]);
            total += triage_sample_loss(w, l_r[i], l_c[i], b_r, b_c);
            d[[i, 0]] = triage_sample_grad(l_r[i], l_c[i], b_r, b_c) * w * (1.0 - w) / b;
        }
        Ok((total / b, self.mlp.backward(&trace, d)))
    }
}

/// Everything the triage stage knows about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageCase {
    pub id: String,
    pub features: Vec<f64>,
    /// Radiologist's diagnosis.
    pub rad: bool,
    /// Classifier malignancy probability.
    pub prob: f64,
    pub outcome: bool,
}

impl TriageCase {
    pub fn new(id: String, fi: &FusionInput, prob: f64, rad: bool, outcome: bool) -> Self {
        Self { id, features: triage_features(fi, prob), rad, prob, outcome }
    }

    /// Radiologist misdiagnosed.
    pub fn l_r(&self) -> bool {
        self.rad != self.outcome
    }

    /// Classifier misdiagnosed at [`CLASSIFIER_ERROR_THRESHOLD`].
    pub fn l_c(&self) -> bool {
        (self.prob >= CLASSIFIER_ERROR_THRESHOLD) != self.outcome
    }
}

fn feature_matrix(cases: &[TriageCase]) -> Result<Array2<f64>> {
    if let Some(c) = cases.iter().find(|c| c.features.len() != TRIAGE_DIM) {
        return Err(Error::DimensionMismatch { expected: TRIAGE_DIM, got: c.features.len() });
    }
    let flat: Vec<f64> = cases.iter().flat_map(|c| c.features.iter().copied()).collect();
    Ok(Array2::from_shape_vec((cases.len(), TRIAGE_DIM), flat).expect("fixed width"))
}

pub fn routes_to_radiologist(w: f64, alpha: f64) -> bool {
    w >= alpha
}

/// Final system diagnosis for one patient.
pub fn decide(w: f64, alpha: f64, beta: f64, rad: bool, prob: f64) -> bool {
    if routes_to_radiologist(w, alpha) {
        rad
    } else {
        prob >= beta
    }
}

/// Confusion of the combined system given precomputed triage scores.
pub fn confusion_with(ws: &[f64], cases: &[TriageCase], alpha: f64, beta: f64) -> ConfusionCounts {
    ConfusionCounts::from_pairs(ws.iter().zip(cases).map(|(&w, c)| (decide(w, alpha, beta, c.rad, c.prob), c.outcome)))
}

pub fn radiologist_confusion(cases: &[TriageCase]) -> ConfusionCounts {
    ConfusionCounts::from_pairs(cases.iter().map(|c| (c.rad, c.outcome)))
}

pub fn classifier_confusion(cases: &[TriageCase], beta: f64) -> ConfusionCounts {
    ConfusionCounts::from_pairs(cases.iter().map(|c| (c.prob >= beta, c.outcome)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub n: usize,
    pub to_radiologist: usize,
    pub system: ConfusionCounts,
    pub radiologist: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriagePolicy {
    pub net: TriageNet,
    pub alpha: f64,
    pub beta: f64,
    pub b_r: f64,
    pub b_c: f64,
    /// Set when no policy beat sending everyone to the radiologist; the
    /// policy is then the trivial `alpha = 0` one.
    pub constraint_bound: bool,
    pub val_metrics: Option<ValMetrics>,
}

impl TriagePolicy {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("thresholds outside [0, 1]: alpha {}, beta {}", self.alpha, self.beta)));
        }
        if !(self.b_r >= 0.0 && self.b_c >= 0.0) {
            return Err(Error::Config("b_r and b_c must be non-negative".into()));
        }
        Ok(())
    }

    pub fn scores(&self, cases: &[TriageCase]) -> Result<Vec<f64>> {
        self.net.forward_batch(feature_matrix(cases)?.view())
    }
}

pub fn triage_forward(policy: &TriagePolicy, features: &[f64]) -> Result<f64> {
    policy.net.forward(features)
}

pub fn system_confusion(policy: &TriagePolicy, cases: &[TriageCase]) -> Result<ConfusionCounts> {
    if cases.is_empty() {
        return Err(Error::MissingPredictions("no patients".into()));
    }
    if let Some(c) = cases.iter().find(|c| !(0.0..=1.0).contains(&c.prob)) {
        return Err(Error::MissingPredictions(format!("patient {} has no valid classifier probability", c.id)));
    }
    Ok(confusion_with(&policy.scores(cases)?, cases, policy.alpha, policy.beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageTrainConfig {
    pub arch: TriageArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerSpec,
}

impl Default for TriageTrainConfig {
    fn default() -> Self {
        Self { arch: TriageArch::default(), epochs: 20, batch_size: 32, lr: 1e-3, optimizer: OptimizerSpec::Adam }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageConfig {
    /// Grid step over `b_r` and `b_c`.
    pub delta: f64,
    pub b_max: f64,
    pub train: TriageTrainConfig,
    pub seed: u64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self { delta: 0.25, b_max: 2.0, train: TriageTrainConfig::default(), seed: 0 }
    }
}

impl TriageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.b_max >= 0.0) {
            return Err(Error::Config("delta must be positive and b_max non-negative".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("triage training needs epochs, batch_size and lr > 0".into()));
        }
        self.train.optimizer.validate()
    }

    /// `0, delta, 2 delta, ...` up to `b_max` (inclusive up to rounding).
    pub fn grid(&self) -> Vec<f64> {
        let steps = (self.b_max / self.delta + 1e-9).floor() as usize;
        (0..=steps).map(|i| i as f64 * self.delta).collect()
    }

    /// Seed of the candidate at grid cell `(i, j)`.
    pub fn candidate_seed(&self, i: usize, j: usize) -> u64 {
        derive(self.seed, &[i as u64, j as u64])
    }
}

/// Gradient descent on the mean triage loss over `cases`.
pub fn train_triage_candidate(cases: &[TriageCase], b_r: f64, b_c: f64, cfg: &TriageTrainConfig, seed: u64) -> Result<TriageNet> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let x = feature_matrix(cases)?;
    let l_r: Vec<bool> = cases.iter().map(TriageCase::l_r).collect();
    let l_c: Vec<bool> = cases.iter().map(TriageCase::l_c).collect();
    let mut net = TriageNet::init(cfg.arch.clone(), seed)?;
    net.mlp.input_scaling = Some(InputScaling::fit(x.view())?);
    let mut opt = cfg.optimizer.build(&net.mlp);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng_for(seed, &[1, epoch as u64]));
        for idx in order.chunks(cfg.batch_size) {
            let xb = x.select(ndarray::Axis(0), idx);
            let lr_b: Vec<bool> = idx.iter().map(|&i| l_r[i]).collect();
            let lc_b: Vec<bool> = idx.iter().map(|&i| l_c[i]).collect();
            let (loss, grads) = net.loss_and_grads(xb.view(), &lr_b, &lc_b, b_r, b_c)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged);
            }
            opt.step(&mut net.mlp, &grads, cfg.lr);
        }
    }
    if !net.mlp.is_finite() {
        return Err(Error::TrainingDiverged);
    }
    Ok(net)
}

/// Distinct values of `xs` together with 0 and 1, ascending.
pub fn threshold_candidates(xs: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.into_iter().chain([0.0, 1.0]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Best thresholds for fixed triage scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub alpha: f64,
    pub beta: f64,
    pub to_radiologist: usize,
    pub counts: ConfusionCounts,
}

impl ThresholdChoice {
    /// Fewer radiologist reads, then fewer false negatives, then fewer false positives.
    fn key(&self) -> (usize, u64, u64) {
        (self.to_radiologist, self.counts.fn_, self.counts.fp)
    }
}

/// Sweeps every `(alpha, beta)` pair from [`threshold_candidates`] of the
/// scores and probabilities and returns the feasible pair with the fewest
/// radiologist reads (ties: lower FN, lower FP, then smaller alpha, smaller
/// beta). Feasible means no more false negatives and no more false positives
/// than the radiologist alone on the same cases. `alpha = 0` is always
/// feasible, so a choice always exists.
pub fn select_thresholds(ws: &[f64], cases: &[TriageCase]) -> ThresholdChoice {
    let rad = radiologist_confusion(cases);
    let alphas = threshold_candidates(ws.iter().copied());
    let betas = threshold_candidates(cases.iter().map(|c| c.prob));
    // cases sorted by classifier probability, for the beta sweep
    let mut by_prob: Vec<usize> = (0..cases.len()).collect();
    by_prob.sort_by(|&a, &b| cases[a].prob.total_cmp(&cases[b].prob));

    let mut best: Option<ThresholdChoice> = None;
    for &alpha in &alphas {
        let mut to_rad = 0usize;
        let mut rad_part = ConfusionCounts::default();
        for (w, c) in ws.iter().zip(cases) {
            if routes_to_radiologist(*w, alpha) {
                to_rad += 1;
                rad_part.record(c.rad, c.outcome);
            }
        }
        if best.as_ref().is_some_and(|b| b.to_radiologist < to_rad) {
            continue;
        }
        // machine-read cases in ascending probability
        let machine: Vec<&TriageCase> =
            by_prob.iter().filter(|&&i| !routes_to_radiologist(ws[i], alpha)).map(|&i| &cases[i]).collect();
        let mut pos_above = machine.iter().filter(|c| c.outcome).count() as u64;
        let mut neg_above = machine.len() as u64 - pos_above;
        let (total_pos, total_neg) = (pos_above, neg_above);
        let mut k = 0;
        for &beta in &betas {
            while k < machine.len() && machine[k].prob < beta {
                if machine[k].outcome {
                    pos_above -= 1;
                } else {
                    neg_above -= 1;
                }
                k += 1;
            }
            let counts = rad_part
                + ConfusionCounts::new(pos_above, total_neg - neg_above, neg_above, total_pos - pos_above);
            if counts.fn_ > rad.fn_ || counts.fp > rad.fp {
                continue;
            }
            let cand = ThresholdChoice { alpha, beta, to_radiologist: to_rad, counts };
            if best.as_ref().is_none_or(|b| cand.key() < b.key()) {
                best = Some(cand);
            }
        }
    }
    best.expect("alpha = 0 reproduces the radiologist and is always feasible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub b_r: f64,
    pub b_c: f64,
    pub choice: ThresholdChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageOutcome {
    pub policy: TriagePolicy,
    /// Grid order: `b_r` major, `b_c` minor.
    pub candidates: Vec<CandidateSummary>,
}

/// Trains one candidate per `(b_r, b_c)` grid cell on `train_set`, picks
/// thresholds for each on `val_set`, and returns the policy with the fewest
/// validation radiologist reads. Ties go to lower FN, lower FP, then earlier
/// grid cell. `val_set` is the only data used for selection; nothing else is
/// read.
pub fn train_triage(train_set: &[TriageCase], val_set: &[TriageCase], cfg: &TriageConfig) -> Result<TriageOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = cfg.grid();
    let cells: Vec<(usize, usize)> = (0..grid.len()).flat_map(|i| (0..grid.len()).map(move |j| (i, j))).collect();
    let val_x = feature_matrix(val_set)?;
    let trained: Vec<(TriageNet, CandidateSummary)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let (b_r, b_c) = (grid[i], grid[j]);
            let net = train_triage_candidate(train_set, b_r, b_c, &cfg.train, cfg.candidate_seed(i, j))?;
            let ws = net.forward_batch(val_x.view())?;
            let choice = select_thresholds(&ws, val_set);
            Ok((net, CandidateSummary { b_r, b_c, choice }))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for k in 1..trained.len() {
        if trained[k].1.choice.key() < trained[best].1.choice.key() {
            best = k;
        }
    }
    let candidates: Vec<CandidateSummary> = trained.iter().map(|(_, s)| s.clone()).collect();
    let (net, summary) = trained.into_iter().nth(best).expect("grid is non-empty");
    let radiologist = radiologist_confusion(val_set);
    let n = val_set.len();
    let policy = if summary.choice.to_radiologist == n {
        TriagePolicy {
            net,
            alpha: 0.0,
            beta: CLASSIFIER_ERROR_THRESHOLD,
            b_r: summary.b_r,
            b_c: summary.b_c,
            constraint_bound: true,
            val_metrics: Some(ValMetrics { n, to_radiologist: n, system: radiologist, radiologist }),
        }
    } else {
        let c = summary.choice;
        TriagePolicy {
            net,
            alpha: c.alpha,
            beta: c.beta,
            b_r: summary.b_r,
            b_c: summary.b_c,
            constraint_bound: false,
            val_metrics: Some(ValMetrics { n, to_radiologist: c.to_radiologist, system: c.counts, radiologist }),
        }
    };
    Ok(TriageOutcome { policy, candidates })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub alpha: f64,
    pub frac_to_radiologist: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub kappa: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl OperatingPoint {
    /// Undefined rates are NaN.
    pub fn from_counts(alpha: f64, to_radiologist: usize, n: usize, counts: ConfusionCounts) -> Self {
        let (fnr, fpr) = counts.fnr_fpr().unwrap_or((f64::NAN, f64::NAN));
        Self {
            alpha,
            frac_to_radiologist: to_radiologist as f64 / n as f64,
            fnr,
            fpr,
            kappa: counts.kappa().unwrap_or(f64::NAN),
            f1: counts.f1().unwrap_or(f64::NAN),
            counts,
        }
    }
}

/// Operating points of `policy` with `alpha` swept from 1 down to 0 over the
/// observed scores, so the radiologist's share never decreases along the list.
/// The first point is classifier-only, the last radiologist-only.
pub fn operating_curve(policy: &TriagePolicy, cases: &[TriageCase]) -> Result<Vec<OperatingPoint>> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ws = policy.scores(cases)?;
    let mut alphas = threshold_candidates(ws.iter().copied());
    alphas.reverse();
    Ok(alphas
        .into_iter()
        .map(|alpha| {
            let to_rad = ws.iter().filter(|&&w| routes_to_radiologist(w, alpha)).count();
            OperatingPoint::from_counts(alpha, to_rad, cases.len(), confusion_with(&ws, cases, alpha, policy.beta))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub kappa: f64,
    pub f1: f64,
    pub draws: usize,
}

/// Mean kappa and F1 when `to_radiologist` patients chosen uniformly at
/// random go to the radiologist and the rest to the classifier at `beta`.
/// Draws with undefined metrics are skipped.
pub fn random_baseline(cases: &[TriageCase], to_radiologist: usize, beta: f64, draws: usize, seed: u64) -> Result<BaselineMetrics> {
    if to_radiologist > cases.len() || draws == 0 {
        return Err(Error::InvalidArgument("baseline needs draws > 0 and workload <= cohort size".into()));
    }
    let (mut k_sum, mut f_sum, mut used) = (0.0, 0.0, 0usize);
    for d in 0..draws {
        let mut ws = vec![0.0; cases.len()];
        for i in index::sample(&mut rng::rng_for(seed, &[d as u64]), cases.len(), to_radiologist) {
            ws[i] = MAX_W;
        }
        let c = confusion_with(&ws, cases, MAX_W, beta);
        if let (Ok(k), Ok(f)) = (c.kappa(), c.f1()) {
            k_sum += k;
            f_sum += f;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::KappaUndefined);
    }
    Ok(BaselineMetrics { kappa: k_sum / used as f64, f1: f_sum / used as f64, draws: used })
}
