//! Patient-level classifier over the four per-view MTOs.
//!
//! The input is the four MTOs in canonical view order followed by the
//! non-imaging features (normalized age, family history), 78 values in all.
//! The per-view network is only ever borrowed immutably here, so fusion
//! training cannot touch its weights.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{PatientRecord, View};
use crate::error::{Error, Result};
use crate::imageproc::{AugmentSpec, GrayImage};
use crate::loss::FocalParams;
use crate::metrics::{auroc, ScoredSample};
use crate::mtlnet::{categorical_focal, normalize_age, predict, predict_tta, MtlNet, Mto, Stage, TrainSchedule, MTO_DIM};
use crate::nn::{clip_grad_norm, softmax, InputScaling, Mlp, OptimizerSpec};
use crate::rng::{self, derive, str_tag};

pub const NONIMAGING_DIM: usize = 2;
pub const FUSION_DIM: usize = 4 * MTO_DIM + NONIMAGING_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nonimaging {
    /// Normalized to `[0, 1]`.
    pub age: f64,
    pub family_history: bool,
}

impl Nonimaging {
    pub fn of(record: &PatientRecord) -> Self {
        Self { age: normalize_age(record.age as f64), family_history: record.family_history }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.age, self.family_history as u8 as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub mto_mlo_r: Mto,
    pub mto_mlo_l: Mto,
    pub mto_cc_r: Mto,
    pub mto_cc_l: Mto,
    pub nonimaging: Nonimaging,
}

impl FusionInput {
    pub fn from_views(mtos: [Mto; 4], nonimaging: Nonimaging) -> Self {
        let [mto_mlo_r, mto_mlo_l, mto_cc_r, mto_cc_l] = mtos;
        Self { mto_mlo_r, mto_mlo_l, mto_cc_r, mto_cc_l, nonimaging }
    }

    /// Canonical view order.
    pub fn views(&self) -> [&Mto; 4] {
        [&self.mto_mlo_r, &self.mto_mlo_l, &self.mto_cc_r, &self.mto_cc_l]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FUSION_DIM);
        for m in self.views() {
            v.extend(m.to_vec());
        }
        v.extend(self.nonimaging.to_vec());
        v
    }
}

/// Builds the fusion input from MTOs keyed by view. Order of `per_view` is
/// irrelevant; every view must appear exactly once.
pub fn assemble(patient: &PatientRecord, per_view: &[(View, Mto)]) -> Result<FusionInput> {
    let mut slots: [Option<Mto>; 4] = [None; 4];
    for &(v, m) in per_view {
        if slots[v as usize].replace(m).is_some() {
            return Err(Error::InvalidArgument(format!("view {} given twice", v.name())));
        }
    }
    let mtos = [slots[0], slots[1], slots[2], slots[3]];
    if mtos.iter().any(Option::is_none) {
        return Err(Error::IncompleteStudy);
    }
    Ok(FusionInput::from_views(mtos.map(|m| m.expect("checked")), Nonimaging::of(patient)))
}

/// Population variance of the four predicted densities on the 0-100 scale.
pub fn density_variance(mtos: [&Mto; 4]) -> f64 {
    let d = mtos.map(|m| 100.0 * m.density);
    let mean = d.iter().sum::<f64>() / 4.0;
    d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0
}

/// Per-view MTOs of one patient. With `tta == 0` the views go through the
/// nominal preprocessing only; otherwise each view gets `tta` augmented copies
/// from its own seed.
pub fn view_mtos(net: &MtlNet, record: &PatientRecord, augment: &AugmentSpec, tta: usize, seed: u64) -> Result<[Mto; 4]> {
    let base = derive(seed, &[str_tag(&record.id)]);
    let mut out = Vec::with_capacity(4);
    for v in View::ALL {
        let img: GrayImage = record.view(v).to_gray();
        out.push(if tta == 0 {
            predict(net, &img, augment)?
        } else {
            predict_tta(net, &img, tta, augment, derive(base, &[v as u64]))?
        });
    }
    Ok([out[0], out[1], out[2], out[3]])
}

pub fn fusion_inputs(
    net: &MtlNet,
    records: &[&PatientRecord],
    augment: &AugmentSpec,
    tta: usize,
    seed: u64,
) -> Result<Vec<FusionInput>> {
    records
        .par_iter()
        .map(|r| Ok(FusionInput::from_views(view_mtos(net, r, augment, tta, seed)?, Nonimaging::of(r))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierArch {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { hidden: vec![128, 64, 32, 16], dropout: 0.2 }
    }
}

impl ClassifierArch {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![FUSION_DIM];
        s.extend(&self.hidden);
        s.push(2);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    pub arch: ClassifierArch,
    pub mlp: Mlp,
    pub seed: u64,
}

impl ClassifierNet {
    pub fn init(arch: ClassifierArch, seed: u64) -> Result<Self> {
        let mlp = Mlp::new(&arch.layer_sizes(), arch.dropout, &mut rng::rng(seed))?;
        Ok(Self { arch, mlp, seed })
    }

    pub fn zeros(arch: ClassifierArch) -> Self {
        let mut mlp = Mlp::zeros(&arch.layer_sizes());
        mlp.dropout = arch.dropout;
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

    /// Malignancy probability for each row of `x`.
    pub fn classify_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let logits = self.mlp.forward(x)?;
        Ok(logits.rows().into_iter().map(|r| softmax(&[r[0], r[1]])[1]).collect())
    }

    pub fn classify_vec(&self, x: &[f64]) -> Result<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.classify_batch(v)?[0])
    }

    /// Mean focal loss of a batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        labels: &[bool],
        focal: FocalParams,
        dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<(f64, crate::nn::Grads)> {
        if labels.len() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: labels.len() });
        }
        let trace = self.mlp.forward_train(x, dropout_rng)?;
        let b = labels.len() as f64;
        let mut d = Array2::zeros(trace.logits.raw_dim());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (l, g) = categorical_focal(&[trace.logits[[i, 0]], trace.logits[[i, 1]]], y as usize, focal);
            total += l;
            d[[i, 0]] = g[0] / b;
            d[[i, 1]] = g[1] / b;
        }
        Ok((total / b, self.mlp.backward(&trace, d)))
    }
}

pub fn classify(net: &ClassifierNet, fi: &FusionInput) -> Result<f64> {
    net.classify_vec(&fi.to_vec())
}

/// One stage-2 patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionExample {
    pub id: String,
    pub input: FusionInput,
    pub label: bool,
}

/// Errors with the number of shared ids when the two sets intersect.
pub fn check_disjoint<'a, 'b>(a: impl IntoIterator<Item = &'a str>, b: impl IntoIterator<Item = &'b str>) -> Result<()> {
    let a: BTreeSet<&str> = a.into_iter().collect();
    let shared = b.into_iter().collect::<BTreeSet<_>>().iter().filter(|x| a.contains(*x)).count();
    if shared > 0 {
        return Err(Error::DataLeakage(shared));
    }
    Ok(())
}

pub fn default_classifier_schedule() -> TrainSchedule {
    TrainSchedule {
        stages: vec![Stage { lr: 1e-3, epochs: 60 }, Stage { lr: 1e-4, epochs: 20 }],
        batch_size: 4,
        optimizer: OptimizerSpec::Adam,
        clip_norm: Some(1.0),
        seed: 0,
    }
}

/// Class-balanced batches: each has `batch_size / 2` positives and as many
/// negatives. The minority class is cycled (reshuffled on each pass) until
/// the majority class is used up once.
pub fn balanced_batches(labels: &[bool], batch_size: usize, rng: &mut rng::Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("balanced batch size must be even, got {batch_size}")));
    }
    let half = batch_size / 2;
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("balanced batches need both classes".into()));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = pos.len().max(neg.len()).div_ceil(half);
    let draw = |pool: &mut Vec<usize>, cursor: &mut usize, rng: &mut rng::Rng| {
        if *cursor == pool.len() {
            pool.shuffle(rng);
            *cursor = 0;
        }
        *cursor += 1;
        pool[*cursor - 1]
    };
    let (mut cp, mut cn) = (0, 0);
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut b = Vec::with_capacity(batch_size);
        for _ in 0..half {
            b.push(draw(&mut pos, &mut cp, rng));
        }
        for _ in 0..half {
            b.push(draw(&mut neg, &mut cn, rng));
        }
        out.push(b);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub val_auroc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

fn matrix(examples: &[FusionExample]) -> Array2<f64> {
    let flat: Vec<f64> = examples.iter().flat_map(|e| e.input.to_vec()).collect();
    Array2::from_shape_vec((examples.len(), FUSION_DIM), flat).expect("fixed width")
}

/// Trains the fusion classifier on stage-2 examples and keeps the checkpoint
/// with the best validation AUROC. Fails if any training id also appears in
/// `stage1_ids`.
pub fn train_classifier<'a>(
    net: ClassifierNet,
    train_set: &[FusionExample],
    val_set: &[FusionExample],
    stage1_ids: impl IntoIterator<Item = &'a str>,
    schedule: &TrainSchedule,
    focal: FocalParams,
) -> Result<(ClassifierNet, ClassifierHistory)> {
    schedule.validate()?;
    net.validate()?;
    check_disjoint(stage1_ids, train_set.iter().map(|e| e.id.as_str()))?;
    if val_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let x = matrix(train_set);
    let labels: Vec<bool> = train_set.iter().map(|e| e.label).collect();
    let val_x = matrix(val_set);

    let mut net = net;
    net.mlp.input_scaling = Some(InputScaling::fit(x.view())?);
    let mut opt = schedule.optimizer.build(&net.mlp);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ClassifierNet)> = None;
    for (epoch, lr) in schedule.epoch_rates().into_iter().enumerate() {
        let batches = balanced_batches(&labels, schedule.batch_size, &mut rng::rng_for(schedule.seed, &[1, epoch as u64]))?;
        let mut dropout_rng = rng::rng_for(schedule.seed, &[2, epoch as u64]);
        for b in batches {
            let xb = x.select(ndarray::Axis(0), &b);
            let yb: Vec<bool> = b.iter().map(|&i| labels[i]).collect();
            let (loss, mut grads) = net.loss_and_grads(xb.view(), &yb, focal, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged);
            }
            if let Some(c) = schedule.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut net.mlp, &grads, lr);
        }
        let scores = net.classify_batch(val_x.view())?;
        let samples: Vec<ScoredSample> = scores.iter().zip(val_set).map(|(&s, e)| ScoredSample::new(s, e.label)).collect();
        let a = auroc(&samples)?;
        history.push(a);
        if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
            best = Some((a, epoch, net.clone()));
        }
    }
    let (best_val_auroc, best_epoch, best_net) = best.ok_or(Error::EmptyInput)?;
    Ok((best_net, ClassifierHistory { val_auroc: history, best_epoch, best_val_auroc }))
}

/// How a patch is altered when probing sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Perturbation {
    /// Replace the patch with the image mean.
    Mean,
    /// Add a constant to the patch.
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencySpec {
    /// Patch half-width; radius 1 is a 3x3 patch.
    pub radius: usize,
    pub stride: usize,
    pub perturbation: Perturbation,
}

impl Default for SaliencySpec {
    fn default() -> Self {
        Self { radius: 1, stride: 1, perturbation: Perturbation::Mean }
    }
}

/// Sensitivity map of a scalar model output. Each patch position is perturbed
/// once; a pixel's value is the mean squared output change over the
/// perturbations whose patch covers it.
pub fn saliency_map(model: impl Fn(&GrayImage) -> Result<f64> + Sync, image: &GrayImage, spec: &SaliencySpec) -> Result<GrayImage> {
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let (w, h) = (image.width, image.height);
    let base = model(image)?;
    let fill = image.mean();
    let r = spec.radius;
    let centers: Vec<(usize, usize)> =
        (0..h).step_by(spec.stride).flat_map(|y| (0..w).step_by(spec.stride).map(move |x| (x, y))).collect();
    let window = |c: usize, n: usize| c.saturating_sub(r)..(c + r + 1).min(n);
    let deltas: Vec<f64> = centers
        .par_iter()
        .map(|&(cx, cy)| {
            let mut img = image.clone();
            for y in window(cy, h) {
                for x in window(cx, w) {
                    let v = match spec.perturbation {
                        Perturbation::Mean => fill,
                        Perturbation::Offset(d) => img.get(x, y) + d,
                    };
                    img.set(x, y, v);
                }
            }
            model(&img).map(|p| (p - base) * (p - base))
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for (&(cx, cy), d) in centers.iter().zip(deltas) {
        for y in window(cy, h) {
            for x in window(cx, w) {
                sum[y * w + x] += d;
                count[y * w + x] += 1;
            }
        }
    }
    let pixels = sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    GrayImage::new(w, h, pixels)
}

/// Saliency of the per-view diagnosis output, with nominal preprocessing.
pub fn saliency(net: &MtlNet, image: &GrayImage, augment: &AugmentSpec, spec: &SaliencySpec) -> Result<GrayImage> {
    saliency_map(|img| predict(net, img, augment).map(|m| m.malignancy()), image, spec)
}
