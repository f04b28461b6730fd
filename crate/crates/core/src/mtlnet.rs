//! Per-view multi-task network.
//!
//! A rectifier MLP maps one preprocessed view to the 19-value multi-task
//! output (MTO): diagnosis (2), sign (6), suspicion (5), conspicuity (4),
//! density (1) and age (1). The four categorical heads are softmax groups,
//! density and age are sigmoid regressions onto `[0, 1]`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{full_pipeline, AugmentSpec, GrayImage, ImageU8, VIEW_PIXELS};
use crate::loss::{focal_grad, focal_loss, mtl_loss, FocalParams, TaskLosses, TaskWeights};
use crate::metrics::{auroc, ScoredSample};
use crate::nn::{clip_grad_norm, sigmoid, softmax, softmax_backward, Grads, Mlp, Optimizer, OptimizerSpec};
use crate::rng::{self, derive, Rng};

pub const MTO_DIM: usize = 19;
pub const DIAGNOSIS: Range<usize> = 0..2;
pub const SIGN: Range<usize> = 2..8;
pub const SUSPICION: Range<usize> = 8..13;
pub const CONSPICUITY: Range<usize> = 13..17;
pub const DENSITY: usize = 17;
pub const AGE: usize = 18;

const CATEGORICAL: [Range<usize>; 4] = [DIAGNOSIS, SIGN, SUSPICION, CONSPICUITY];

/// Augmented copies averaged per view at test time.
pub const DEFAULT_TTA: usize = 100;

/// Lower end of the age normalization range, in years.
pub const AGE_MIN: f64 = 40.0;
pub const AGE_SPAN: f64 = 33.0;

pub fn normalize_age(years: f64) -> f64 {
    (years - AGE_MIN) / AGE_SPAN
}

pub fn denormalize_age(v: f64) -> f64 {
    AGE_MIN + AGE_SPAN * v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mto {
    /// `[benign, malignant]`
    pub diagnosis: [f64; 2],
    pub sign: [f64; 6],
    pub suspicion: [f64; 5],
    pub conspicuity: [f64; 4],
    /// Fraction of the 0-100 density scale.
    pub density: f64,
    /// Normalized age, see [`normalize_age`].
    pub age: f64,
}

impl Mto {
    pub fn from_logits(z: &[f64]) -> Self {
        let copy = |r: Range<usize>, out: &mut [f64]| out.copy_from_slice(&softmax(&z[r]));
        let mut m = Self::zeroed();
        copy(DIAGNOSIS, &mut m.diagnosis);
        copy(SIGN, &mut m.sign);
        copy(SUSPICION, &mut m.suspicion);
        copy(CONSPICUITY, &mut m.conspicuity);
        m.density = sigmoid(z[DENSITY]);
        m.age = sigmoid(z[AGE]);
        m
    }

    fn zeroed() -> Self {
        Self { diagnosis: [0.0; 2], sign: [0.0; 6], suspicion: [0.0; 5], conspicuity: [0.0; 4], density: 0.0, age: 0.0 }
    }

    pub fn malignancy(&self) -> f64 {
        self.diagnosis[1]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(MTO_DIM);
        v.extend_from_slice(&self.diagnosis);
        v.extend_from_slice(&self.sign);
        v.extend_from_slice(&self.suspicion);
        v.extend_from_slice(&self.conspicuity);
        v.push(self.density);
        v.push(self.age);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != MTO_DIM {
            return Err(Error::DimensionMismatch { expected: MTO_DIM, got: v.len() });
        }
        let mut m = Self::zeroed();
        m.diagnosis.copy_from_slice(&v[DIAGNOSIS]);
        m.sign.copy_from_slice(&v[SIGN]);
        m.suspicion.copy_from_slice(&v[SUSPICION]);
        m.conspicuity.copy_from_slice(&v[CONSPICUITY]);
        m.density = v[DENSITY];
        m.age = v[AGE];
        Ok(m)
    }

    /// Component-wise mean, summed in slice order.
    pub fn mean(items: &[Mto]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut acc = vec![0.0; MTO_DIM];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.to_vec()) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Self::from_slice(&acc)
    }

    /// Every categorical head sums to one within `tol` and all values lie in `[0, 1]`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let v = self.to_vec();
        v.iter().all(|x| (0.0..=1.0).contains(x))
            && CATEGORICAL.iter().all(|r| (v[r.clone()].iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtlLabels {
    pub diagnosis: bool,
    pub sign: usize,
    pub suspicion: usize,
    pub conspicuity: usize,
    /// `[0, 1]`
    pub density: f64,
    /// `[0, 1]`
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MtlArch {
    fn default() -> Self {
        Self { input: VIEW_PIXELS, hidden: vec![128, 64], dropout: 0.2 }
    }
}

impl MtlArch {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input];
        s.extend(&self.hidden);
        s.push(MTO_DIM);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlNet {
    pub arch: MtlArch,
    pub mlp: Mlp,
    pub seed: u64,
}

/// How per-sample task losses combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: TaskWeights,
    pub focal: FocalParams,
    /// Multipliers on the diagnosis loss for `[benign, malignant]` samples.
    pub class_weights: [f64; 2],
}

impl LossConfig {
    pub fn new(weights: TaskWeights, focal: FocalParams) -> Self {
        Self { weights, focal, class_weights: [1.0, 1.0] }
    }
}

/// Inverse-frequency class weights `n / (2 n_c)`.
pub fn inverse_frequency_weights(labels: impl IntoIterator<Item = bool>) -> [f64; 2] {
    let (mut n, mut pos) = (0usize, 0usize);
    for l in labels {
        n += 1;
        pos += l as usize;
    }
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return [1.0, 1.0];
    }
    [n as f64 / (2.0 * neg as f64), n as f64 / (2.0 * pos as f64)]
}

pub fn categorical_focal(z: &[f64], target: usize, fp: FocalParams) -> (f64, Vec<f64>) {
    let p = softmax(z);
    let k = p.len() as f64;
    let mut loss = 0.0;
    let dp: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            loss += focal_loss(pj, j == target, fp);
            focal_grad(pj, j == target, fp) / k
        })
        .collect();
    (loss / k, softmax_backward(&p, &dp))
}

fn regression(z: f64, target: f64) -> (f64, f64) {
    let s = sigmoid(z);
    ((s - target) * (s - target), 2.0 * (s - target) * s * (1.0 - s))
}

/// Loss of one sample and its gradient with respect to the 19 logits.
pub fn sample_loss_grad(z: &[f64], y: &MtlLabels, cfg: &LossConfig) -> Result<(f64, TaskLosses, [f64; MTO_DIM])> {
    let w = &cfg.weights;
    let cw = cfg.class_weights[y.diagnosis as usize];
    let mut g = [0.0; MTO_DIM];
    let mut losses = TaskLosses::default();
    let heads: [(Range<usize>, usize, f64, &mut f64); 4] = [
        (DIAGNOSIS, y.diagnosis as usize, w.diagnosis * cw, &mut losses.diagnosis),
        (SIGN, y.sign, w.sign, &mut losses.sign),
        (SUSPICION, y.suspicion, w.suspicion, &mut losses.suspicion),
        (CONSPICUITY, y.conspicuity, w.conspicuity, &mut losses.conspicuity),
    ];
    for (range, target, weight, slot) in heads {
        if target >= range.len() {
            return Err(Error::InvalidArgument(format!("label {target} outside head of size {}", range.len())));
        }
        let (l, dz) = categorical_focal(&z[range.clone()], target, cfg.focal);
        *slot = l;
        for (gi, d) in g[range].iter_mut().zip(dz) {
            *gi = weight * d;
        }
    }
    let (ld, gd) = regression(z[DENSITY], y.density);
    let (la, ga) = regression(z[AGE], y.age);
    losses.density = ld;
    losses.age = la;
    g[DENSITY] = w.density * gd;
    g[AGE] = w.age * ga;
    // class weight applies to the diagnosis term only
    let mut weighted = losses;
    weighted.diagnosis *= cw;
    Ok((mtl_loss(&weighted, w)?, losses, g))
}

impl MtlNet {
    pub fn init(arch: MtlArch, seed: u64) -> Result<Self> {
        if arch.hidden.is_empty() {
            return Err(Error::InvalidArchitecture("at least one hidden layer required".into()));
        }
        let mlp = Mlp::new(&arch.layer_sizes(), arch.dropout, &mut rng::rng(seed))?;
        Ok(Self { arch, mlp, seed })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: MtlArch) -> Self {
        let mut mlp = Mlp::zeros(&arch.layer_sizes());
        mlp.dropout = arch.dropout;
        Self { arch, mlp, seed: 0 }
    }

    /// Checks that the layer stack matches the architecture descriptor.
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

    pub fn forward(&self, input: &[f64]) -> Result<Mto> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.forward_batch(x)?.remove(0))
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Mto>> {
        let logits = self.mlp.forward(x)?;
        Ok(logits.rows().into_iter().map(|r| Mto::from_logits(r.as_slice().expect("row-major"))).collect())
    }

    /// Mean loss and parameter gradients over a batch. Dropout is active
    /// only when `dropout_rng` is given.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        labels: &[MtlLabels],
        cfg: &LossConfig,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, Grads)> {
        if labels.len() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: labels.len() });
        }
        let trace = self.mlp.forward_train(x, dropout_rng)?;
        let b = labels.len() as f64;
        let mut d = Array2::zeros(trace.logits.raw_dim());
        let mut total = 0.0;
        for (i, y) in labels.iter().enumerate() {
            let z = trace.logits.row(i);
            let (l, _, g) = sample_loss_grad(z.as_slice().expect("row-major"), y, cfg)?;
            total += l;
            for (j, gj) in g.iter().enumerate() {
                d[[i, j]] = gj / b;
            }
        }
        Ok((total / b, self.mlp.backward(&trace, d)))
    }

    /// Mean inference-mode loss.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[MtlLabels], cfg: &LossConfig) -> Result<f64> {
        let logits = self.mlp.forward(x)?;
        let mut total = 0.0;
        for (i, y) in labels.iter().enumerate() {
            total += sample_loss_grad(logits.row(i).as_slice().expect("row-major"), y, cfg)?.0;
        }
        Ok(total / labels.len() as f64)
    }

    /// One gradient step; returns the batch loss before the step.
    pub fn train_step(
        &mut self,
        opt: &mut Optimizer,
        x: ArrayView2<f64>,
        labels: &[MtlLabels],
        cfg: &LossConfig,
        lr: f64,
        clip_norm: Option<f64>,
        dropout_rng: &mut Rng,
    ) -> Result<f64> {
        let (loss, mut grads) = self.loss_and_grads(x, labels, cfg, Some(dropout_rng))?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged);
        }
        if let Some(c) = clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(&mut self.mlp, &grads, lr);
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Global gradient-norm ceiling applied before every step.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stages: vec![Stage { lr: 3e-3, epochs: 5 }, Stage { lr: 3e-4, epochs: 20 }],
            batch_size: 16,
            optimizer: OptimizerSpec::Sgd { momentum: 0.9 },
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.batch_size == 0 {
            return Err(Error::Config("schedule needs at least one stage and batch_size > 0".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.stages.iter().any(|s| !(s.lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.stages.windows(2).any(|w| w[1].lr > w[0].lr) {
            return Err(Error::Config("learning rates must be non-increasing across stages".into()));
        }
        self.optimizer.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Learning rate of each epoch in order.
    pub fn epoch_rates(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| std::iter::repeat_n(s.lr, s.epochs)).collect()
    }
}

/// One training view.
#[derive(Debug, Clone, Copy)]
pub struct ViewExample<'a> {
    pub image: &'a ImageU8,
    pub labels: MtlLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

/// Augments and flattens views into the rows of a batch matrix.
pub fn preprocess_batch(images: &[&GrayImage], spec: &AugmentSpec, seeds: &[u64]) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(img, &s)| full_pipeline(img, spec, s).map(|g| g.pixels))
        .collect::<Result<_>>()?;
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Trains with augmentation and returns the checkpoint with the best
/// validation diagnosis AUROC seen at any epoch end.
pub fn train(
    net: MtlNet,
    train_set: &[ViewExample<'_>],
    val_set: &[ViewExample<'_>],
    schedule: &TrainSchedule,
    weights: TaskWeights,
    focal: FocalParams,
    augment: &AugmentSpec,
) -> Result<(MtlNet, TrainHistory)> {
    schedule.validate()?;
    weights.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cfg = LossConfig {
        weights,
        focal,
        class_weights: inverse_frequency_weights(train_set.iter().map(|e| e.labels.diagnosis)),
    };
    let train_imgs: Vec<GrayImage> = train_set.par_iter().map(|e| e.image.to_gray()).collect();
    let val_imgs: Vec<GrayImage> = val_set.par_iter().map(|e| e.image.to_gray()).collect();
    let val_refs: Vec<&GrayImage> = val_imgs.iter().collect();
    let val_x = preprocess_batch(&val_refs, &augment.inference(), &vec![0; val_refs.len()])?;
    let val_labels: Vec<bool> = val_set.iter().map(|e| e.labels.diagnosis).collect();

    let mut net = net;
    let mut opt = schedule.optimizer.build(&net.mlp);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, MtlNet)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    const CHUNK: usize = 512;

    for (epoch, lr) in schedule.epoch_rates().into_iter().enumerate() {
        order.shuffle(&mut rng::rng_for(schedule.seed, &[1, epoch as u64]));
        let mut dropout_rng = rng::rng_for(schedule.seed, &[2, epoch as u64]);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(CHUNK) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &train_imgs[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| derive(schedule.seed, &[3, epoch as u64, i as u64])).collect();
            let x = preprocess_batch(&imgs, augment, &seeds)?;
            for (b, idx) in chunk.chunks(schedule.batch_size).enumerate() {
                let start = b * schedule.batch_size;
                let xb = x.slice(ndarray::s![start..start + idx.len(), ..]);
                let labels: Vec<MtlLabels> = idx.iter().map(|&i| train_set[i].labels).collect();
                loss_sum += net.train_step(&mut opt, xb, &labels, &cfg, lr, schedule.clip_norm, &mut dropout_rng)?;
                batches += 1;
            }
        }
        let val_scores: Vec<f64> = net.forward_batch(val_x.view())?.iter().map(Mto::malignancy).collect();
        let samples: Vec<ScoredSample> =
            val_scores.iter().zip(&val_labels).map(|(&s, &l)| ScoredSample::new(s, l)).collect();
        let val_auroc = auroc(&samples)?;
        history.push(EpochRecord { epoch, lr, train_loss: loss_sum / batches as f64, val_auroc });
        if best.as_ref().is_none_or(|(a, _, _)| val_auroc > *a) {
            best = Some((val_auroc, epoch, net.clone()));
        }
    }
    let (best_val_auroc, best_epoch, best_net) = best.ok_or(Error::EmptyInput)?;
    Ok((best_net, TrainHistory { epochs: history, best_epoch, best_val_auroc }))
}

/// Mean MTO over `n` independently augmented copies of a view.
pub fn predict_tta(net: &MtlNet, image: &GrayImage, n: usize, augment: &AugmentSpec, seed: u64) -> Result<Mto> {
    if n == 0 {
        return Err(Error::InvalidArgument("TTA needs n >= 1".into()));
    }
    let imgs = vec![image; n];
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive(seed, &[i])).collect();
    let x = preprocess_batch(&imgs, augment, &seeds)?;
    Mto::mean(&net.forward_batch(x.view())?)
}

/// Inference without augmentation (nominal preprocessing only).
pub fn predict(net: &MtlNet, image: &GrayImage, augment: &AugmentSpec) -> Result<Mto> {
    let x = full_pipeline(image, &augment.inference(), 0)?;
    net.forward(&x.pixels)
}
