//! Synthetic screening cohort: phantom views, ground-truth labels, a
//! simulated radiologist, partitioning and CSV storage.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{GrayImage, ImageU8, VIEW_HEIGHT, VIEW_WIDTH};
use crate::rng::{self, derive, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    MloR,
    MloL,
    CcR,
    CcL,
}

impl View {
    /// Canonical order.
    pub const ALL: [View; 4] = [View::MloR, View::MloL, View::CcR, View::CcL];

    pub fn name(self) -> &'static str {
        match self {
            View::MloR => "mlo_r",
            View::MloL => "mlo_l",
            View::CcR => "cc_r",
            View::CcL => "cc_l",
        }
    }

    pub fn is_mlo(self) -> bool {
        matches!(self, View::MloR | View::MloL)
    }

    pub fn is_right(self) -> bool {
        matches!(self, View::MloR | View::CcR)
    }
}

macro_rules! named_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                Self::ALL
                    .iter()
                    .find(|v| v.name() == s)
                    .copied()
                    .or_else(|| s.parse::<usize>().ok().and_then(Self::from_index))
                    .ok_or_else(|| format!("unknown {} '{s}'", stringify!($ty)))
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    None,
    Circumscribed,
    Spiculated,
    MicroCalcification,
    Distortion,
    Asymmetric,
}

named_enum!(Sign {
    None => "none",
    Circumscribed => "circumscribed",
    Spiculated => "spiculated",
    MicroCalcification => "micro_calcification",
    Distortion => "distortion",
    Asymmetric => "asymmetric",
});

impl Sign {
    pub const LESIONS: [Sign; 5] =
        [Sign::Circumscribed, Sign::Spiculated, Sign::MicroCalcification, Sign::Distortion, Sign::Asymmetric];

    /// Extra suspicion levels a reader assigns to this sign.
    fn risk(self) -> usize {
        match self {
            Sign::Spiculated => 2,
            Sign::MicroCalcification | Sign::Distortion => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallType {
    OneReader,
    TwoReaders,
    Arbitration,
}

named_enum!(RecallType {
    OneReader => "one_reader",
    TwoReaders => "two_readers",
    Arbitration => "arbitration",
});

pub const AGE_BINS: [(u32, u32); 4] = [(40, 49), (50, 59), (60, 69), (70, 73)];
pub const DENSITY_BIN_EDGES: [f64; 3] = [25.0, 50.0, 75.0];
pub const NUM_SUSPICION: usize = 5;
pub const NUM_CONSPICUITY: usize = 4;

pub fn age_bin(age: u32) -> usize {
    AGE_BINS.iter().position(|&(_, hi)| age <= hi).unwrap_or(AGE_BINS.len() - 1)
}

pub fn density_bin(density: f64) -> usize {
    DENSITY_BIN_EDGES.iter().take_while(|&&e| density >= e).count()
}

/// Suspicion level a reader derives from the visible finding.
pub fn suspicion_rule(sign: Sign, conspicuity: usize, malignant: bool) -> usize {
    if sign == Sign::None {
        return 0;
    }
    (1 + sign.risk() + malignant as usize + (conspicuity >= 2) as usize).clamp(1, NUM_SUSPICION - 1)
}

/// Rounds to 6 significant digits, the storage precision of the cohort CSV.
pub fn round6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

// ---------------------------------------------------------------- phantoms

/// Everything needed to render one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// VAS percent in `[0, 100]`.
    pub density: f64,
    pub sign: Sign,
    pub conspicuity: usize,
    pub malignant: bool,
    pub mlo: bool,
    /// Mirror horizontally (left-side views).
    pub mirrored: bool,
    /// Adds a benign overlapping-tissue blob that mimics a finding.
    pub overlap: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            density: 30.0,
            sign: Sign::None,
            conspicuity: 0,
            malignant: false,
            mlo: false,
            mirrored: false,
            overlap: false,
            seed: 0,
        }
    }
}

/// Lesion-background contrast per conspicuity level.
pub const CONSPICUITY_CONTRAST: [f64; NUM_CONSPICUITY] = [0.08, 0.2, 0.35, 0.5];

const BACKGROUND: f64 = 0.02;
const FAT: f64 = 0.30;
const GLANDULAR: f64 = 0.30;
const PECTORAL: f64 = 0.75;
const SPECKLE: f64 = 0.015;
const BRIGHT_LEVEL: f64 = 0.45;

fn breast_mask(x: f64, y: f64) -> bool {
    let (cx, cy, a, b) = (0.0, VIEW_HEIGHT as f64 / 2.0, 34.0, 24.0);
    let (dx, dy) = ((x - cx) / a, (y - cy) / b);
    dx * dx + dy * dy <= 1.0
}

fn pectoral_mask(x: f64, y: f64) -> bool {
    x / 14.0 + y / 20.0 < 1.0
}

/// Bilinearly upsampled Gaussian noise grid.
fn smooth_field(gw: usize, gh: usize, rng: &mut Rng) -> impl Fn(f64, f64) -> f64 {
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    move |x, y| {
        let fx = x / VIEW_WIDTH as f64 * (gw - 1) as f64;
        let fy = y / VIEW_HEIGHT as f64 * (gh - 1) as f64;
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let g = |i: usize, j: usize| grid[j * gw + i];
        (1.0 - ty) * ((1.0 - tx) * g(x0, y0) + tx * g(x1, y0)) + ty * ((1.0 - tx) * g(x0, y1) + tx * g(x1, y1))
    }
}

/// Random point well inside the breast.
fn lesion_center(rng: &mut Rng) -> (f64, f64) {
    loop {
        let x = rng.random_range(8.0..20.0);
        let y = rng.random_range(18.0..34.0);
        let (dx, dy) = (x / 30.0, (y - VIEW_HEIGHT as f64 / 2.0) / 20.0);
        if dx * dx + dy * dy <= 1.0 {
            return (x, y);
        }
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

/// Additive lesion intensity over the view (before mirroring).
fn lesion_layer(sign: Sign, conspicuity: usize, malignant: bool, rng: &mut Rng) -> Vec<f64> {
    let mut layer = vec![0.0; VIEW_WIDTH * VIEW_HEIGHT];
    if sign == Sign::None {
        return layer;
    }
    let c = CONSPICUITY_CONTRAST[conspicuity.min(NUM_CONSPICUITY - 1)];
    let scale = if malignant { 1.2 } else { 1.0 };
    let r = rng.random_range(4.0..6.0) * scale;
    let (cx, cy) = lesion_center(rng);
    let mut paint = |f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..VIEW_HEIGHT {
            for x in 0..VIEW_WIDTH {
                let v = f(x as f64 + 0.5, y as f64 + 0.5);
                let slot = &mut layer[y * VIEW_WIDTH + x];
                *slot = slot.max(v);
            }
        }
    };
    match sign {
        Sign::None => {}
        Sign::Circumscribed => {
            // malignant masses get lobulated margins
            let lobes = if malignant { 0.25 } else { 0.0 };
            let phase = rng.random_range(0.0..2.0 * PI);
            paint(&|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let rr = r * (1.0 + lobes * (3.0 * dy.atan2(dx) + phase).sin());
                c * (1.0 - ((dx * dx + dy * dy).sqrt() - rr + 0.5).clamp(0.0, 1.0))
            });
        }
        Sign::Spiculated => {
            let core = r * 0.6;
            let spikes = rng.random_range(6..=10);
            let phase = rng.random_range(0.0..2.0 * PI);
            let ends: Vec<(f64, f64)> = (0..spikes)
                .map(|k| {
                    let a = phase + 2.0 * PI * k as f64 / spikes as f64 + rng.random_range(-0.2..0.2);
                    let len = r * rng.random_range(1.3..1.9);
                    (cx + len * a.cos(), cy + len * a.sin())
                })
                .collect();
            paint(&|x, y| {
                let d_core = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let mut v: f64 = if d_core <= core { c } else { 0.0 };
                for &e in &ends {
                    if dist_to_segment((x, y), (cx, cy), e) < 0.6 {
                        v = v.max(0.8 * c);
                    }
                }
                v
            });
        }
        Sign::MicroCalcification => {
            let n = rng.random_range(5..=9);
            let dots: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let d = rng.random_range(0.0..2.0 * r);
                    (cx + d * a.cos(), cy + d * a.sin())
                })
                .collect();
            paint(&|x, y| {
                let hit = dots.iter().any(|&(dx, dy)| (x - dx).abs() < 0.5 && (y - dy).abs() < 0.5);
                if hit {
                    (1.5 * c).min(0.6)
                } else {
                    0.0
                }
            });
        }
        Sign::Distortion => {
            // radiating curved strands around an empty centre
            let strands = rng.random_range(4..=7);
            let twist = rng.random_range(0.5..1.2);
            let phase = rng.random_range(0.0..2.0 * PI);
            paint(&|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let d = (dx * dx + dy * dy).sqrt();
                if d < 0.8 || d > 2.2 * r {
                    return 0.0;
                }
                let a = dy.atan2(dx) - twist * d / r - phase;
                let k = strands as f64;
                let off = (a * k / (2.0 * PI)).rem_euclid(1.0);
                if (off - 0.5).abs() < 0.15 {
                    0.8 * c
                } else {
                    0.0
                }
            });
        }
        Sign::Asymmetric => {
            let (ax, ay) = (2.5 * r, 1.6 * r);
            let tilt = rng.random_range(0.0..PI);
            let tex = smooth_field(9, 11, rng);
            paint(&|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (dx * tilt.cos() + dy * tilt.sin(), -dx * tilt.sin() + dy * tilt.cos());
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    0.6 * c * (1.0 + 0.3 * tex(x, y)).clamp(0.4, 1.6)
                } else {
                    0.0
                }
            });
        }
    }
    layer
}

/// Renders one view; returns the image and the lesion mask.
pub fn generate_phantom(spec: &PhantomSpec) -> (GrayImage, Vec<bool>) {
    let mut rng = rng::rng(spec.seed);
    let coarse = smooth_field(6, 7, &mut rng);
    let fine = smooth_field(12, 15, &mut rng);
    let field = |x: f64, y: f64| coarse(x, y) + 0.5 * fine(x, y);

    let (w, h) = (VIEW_WIDTH, VIEW_HEIGHT);
    let centre = |i: usize| i as f64 + 0.5;
    let tissue: Vec<(usize, f64)> = (0..w * h)
        .filter_map(|i| {
            let (x, y) = (centre(i % w), centre(i / w));
            (breast_mask(x, y) && !(spec.mlo && pectoral_mask(x, y))).then(|| (i, field(x, y)))
        })
        .collect();
    let mut sorted: Vec<f64> = tissue.iter().map(|t| t.1).collect();
    sorted.sort_by(f64::total_cmp);
    let frac = (spec.density / 100.0).clamp(0.0, 1.0);
    let n_bright = (frac * sorted.len() as f64).round() as usize;
    let cut = if n_bright == 0 { f64::INFINITY } else { sorted[sorted.len() - n_bright] };

    let mut px = vec![BACKGROUND; w * h];
    for i in 0..w * h {
        let (x, y) = (centre(i % w), centre(i / w));
        if breast_mask(x, y) {
            px[i] = if spec.mlo && pectoral_mask(x, y) { PECTORAL } else { FAT };
        }
    }
    for &(i, f) in &tissue {
        if f >= cut {
            px[i] += GLANDULAR;
        }
    }

    let lesion = lesion_layer(spec.sign, spec.conspicuity, spec.malignant, &mut rng);
    let overlap = if spec.overlap {
        let (ox, oy) = lesion_center(&mut rng);
        let or = rng.random_range(2.0..4.0);
        (0..w * h)
            .map(|i| {
                let d = ((centre(i % w) - ox).powi(2) + (centre(i / w) - oy).powi(2)).sqrt();
                0.12 * (1.0 - (d / or).powi(2)).max(0.0)
            })
            .collect()
    } else {
        vec![0.0; w * h]
    };
    let speckle = Normal::new(0.0, SPECKLE).expect("valid sigma");
    let mut mask = vec![false; w * h];
    for i in 0..w * h {
        if breast_mask(centre(i % w), centre(i / w)) {
            px[i] += lesion[i] + overlap[i] + speckle.sample(&mut rng);
            mask[i] = lesion[i] > 0.0;
        }
        px[i] = px[i].clamp(0.0, 1.0);
    }
    let mut img = GrayImage::new(w, h, px).expect("sized buffer");
    if spec.mirrored {
        img = GrayImage::from_fn(w, h, |x, y| img.get(w - 1 - x, y));
        mask = (0..w * h).map(|i| mask[(i / w) * w + (w - 1 - i % w)]).collect();
    }
    (img, mask)
}

/// Fraction of breast pixels rendered as dense tissue.
pub fn bright_fraction(img: &GrayImage) -> f64 {
    let tissue = img.pixels.iter().filter(|&&p| p > 0.15);
    let (mut n, mut bright) = (0usize, 0usize);
    for &p in tissue {
        n += 1;
        bright += (p > BRIGHT_LEVEL) as usize;
    }
    if n == 0 {
        0.0
    } else {
        bright as f64 / n as f64
    }
}

// ---------------------------------------------------------------- strata

/// Marginal proportions over the population and among cancers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub total: Vec<f64>,
    pub cancer: Vec<f64>,
}

impl Marginal {
    /// Distribution among non-cancers implied by the two columns.
    pub fn benign(&self, prevalence: f64) -> Vec<f64> {
        self.total.iter().zip(&self.cancer).map(|(t, c)| (t - prevalence * c) / (1.0 - prevalence)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrataConfig {
    pub prevalence: f64,
    /// Age bins 40-49, 50-59, 60-69, 70-73.
    pub age: Marginal,
    /// Density bins 0-24, 25-49, 50-74, 75-100.
    pub density: Marginal,
    /// Dominant sign among findings: circumscribed, spiculated,
    /// micro-calcification, distortion, asymmetric.
    pub sign: Marginal,
    /// Fraction of non-cancers with no finding at all.
    pub benign_no_finding: f64,
    /// Conspicuity of findings, not visible .. clearly visible.
    pub conspicuity: Vec<f64>,
    pub recall_type: Vec<f64>,
    /// Women under this age are in the family-history programme.
    pub family_history_age: u32,
    pub family_history_rate: f64,
    /// Typical density excess (VAS points) of the lesion side in cancers;
    /// each cancer draws between half and one and a half times this.
    pub malignant_asymmetry: f64,
    /// Per-view density scatter (VAS points) shared by every patient.
    pub benign_asymmetry: f64,
    pub overlap_rate: f64,
}

impl Default for StrataConfig {
    fn default() -> Self {
        Self {
            prevalence: 1677.0 / 8162.0,
            age: Marginal { total: vec![0.06, 0.59, 0.29, 0.06], cancer: vec![0.03, 0.40, 0.45, 0.12] },
            density: Marginal { total: vec![0.27, 0.43, 0.23, 0.07], cancer: vec![0.33, 0.38, 0.24, 0.05] },
            sign: Marginal {
                total: vec![0.31, 0.13, 0.17, 0.08, 0.31],
                cancer: vec![0.14, 0.44, 0.24, 0.09, 0.09],
            },
            benign_no_finding: 0.25,
            conspicuity: vec![0.05, 0.2, 0.35, 0.4],
            recall_type: vec![0.5, 0.3, 0.2],
            family_history_age: 47,
            family_history_rate: 0.05,
            malignant_asymmetry: 15.0,
            benign_asymmetry: 3.0,
            overlap_rate: 0.5,
        }
    }
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidProportions(format!("{name}: expected {len} entries, got {}", p.len())));
    }
    if p.iter().any(|v| !(*v >= -1e-9) || !v.is_finite()) {
        return Err(Error::InvalidProportions(format!("{name}: negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProportions(format!("{name}: sums to {s}")));
    }
    Ok(())
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidProportions(format!("{name} must be in [0, 1]")));
    }
    Ok(())
}

impl StrataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::InvalidProportions("prevalence must be in (0, 1)".into()));
        }
        for (name, m, len) in [("age", &self.age, 4), ("density", &self.density, 4), ("sign", &self.sign, 5)] {
            check_distribution(&format!("{name}.total"), &m.total, len)?;
            check_distribution(&format!("{name}.cancer"), &m.cancer, len)?;
            check_distribution(&format!("{name} (implied benign)"), &m.benign(self.prevalence), len)?;
        }
        check_distribution("conspicuity", &self.conspicuity, NUM_CONSPICUITY)?;
        check_distribution("recall_type", &self.recall_type, 3)?;
        check_rate("benign_no_finding", self.benign_no_finding)?;
        check_rate("family_history_rate", self.family_history_rate)?;
        check_rate("overlap_rate", self.overlap_rate)?;
        if !(self.malignant_asymmetry >= 0.0 && self.benign_asymmetry >= 0.0) {
            return Err(Error::InvalidProportions("asymmetry spreads must be >= 0".into()));
        }
        Ok(())
    }

    /// Probability of each conspicuity level for a patient of the given class.
    pub fn conspicuity_given(&self, malignant: bool) -> Vec<f64> {
        if malignant {
            return self.conspicuity.clone();
        }
        let finding = 1.0 - self.benign_no_finding;
        let mut p: Vec<f64> = self.conspicuity.iter().map(|c| c * finding).collect();
        p[0] += self.benign_no_finding;
        p
    }
}

fn categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi.max(0.0);
        if u < acc {
            return i;
        }
    }
    // fall back to the last bin with mass (guards rounding in the cumulative sum)
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Ground truth of one patient; cheap to sample without images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub age: u32,
    pub family_history: bool,
    pub recall_type: RecallType,
    /// Patient-level density (VAS %).
    pub base_density: f64,
    /// Per-view densities in canonical view order.
    pub densities: [f64; 4],
    pub sign: Sign,
    pub conspicuity: usize,
    pub malignant: bool,
    pub lesion_right: bool,
    pub seed: u64,
}

impl PatientTruth {
    pub fn suspicion(&self) -> usize {
        suspicion_rule(self.sign, self.conspicuity, self.malignant)
    }

    pub fn stratum(&self) -> StratumKey {
        StratumKey {
            conspicuity: self.conspicuity,
            density_bin: density_bin(self.base_density),
            family_history: self.family_history,
        }
    }

    /// Rendering spec of one view.
    pub fn phantom_spec(&self, view: View, overlap: bool) -> PhantomSpec {
        let lesion_here = self.sign != Sign::None && view.is_right() == self.lesion_right;
        PhantomSpec {
            density: self.densities[view as usize],
            sign: if lesion_here { self.sign } else { Sign::None },
            conspicuity: self.conspicuity,
            malignant: self.malignant,
            mlo: view.is_mlo(),
            mirrored: !view.is_right(),
            overlap,
            seed: derive(self.seed, &[10, view as u64]),
        }
    }
}

pub fn sample_truth(cfg: &StrataConfig, seed: u64) -> PatientTruth {
    let mut rng = rng::rng_for(seed, &[0]);
    let malignant = rng.random_bool(cfg.prevalence);
    let pick = |m: &Marginal, rng: &mut Rng| {
        if malignant {
            categorical(&m.cancer, rng)
        } else {
            categorical(&m.benign(cfg.prevalence), rng)
        }
    };
    let (lo, hi) = AGE_BINS[pick(&cfg.age, &mut rng)];
    let age = rng.random_range(lo..=hi);
    let db = pick(&cfg.density, &mut rng);
    let base_density = rng.random_range(db as f64 * 25.0..(db as f64 + 1.0) * 25.0);
    let lesion_right = rng.random_bool(0.5);
    // cancers raise the density of both views on the lesion side
    let offset = if malignant { cfg.malignant_asymmetry * rng.random_range(0.5..1.5) } else { 0.0 };
    let mut densities = [0.0; 4];
    for (d, v) in densities.iter_mut().zip(View::ALL) {
        let noise: f64 = rng.sample(StandardNormal);
        let shift = if v.is_right() == lesion_right { offset } else { 0.0 };
        *d = round6((base_density + shift + cfg.benign_asymmetry * noise).clamp(0.0, 100.0));
    }
    let no_finding = !malignant && rng.random_bool(cfg.benign_no_finding);
    let sign_idx = pick(&cfg.sign, &mut rng);
    let sign = if no_finding { Sign::None } else { Sign::LESIONS[sign_idx] };
    let conspicuity = if sign == Sign::None { 0 } else { categorical(&cfg.conspicuity, &mut rng) };
    let family_history = age < cfg.family_history_age || rng.random_bool(cfg.family_history_rate);
    let recall_type = RecallType::ALL[categorical(&cfg.recall_type, &mut rng)];
    PatientTruth {
        age,
        family_history,
        recall_type,
        base_density: round6(base_density),
        densities,
        sign,
        conspicuity,
        malignant,
        lesion_right,
        seed: derive(seed, &[1]),
    }
}

// ---------------------------------------------------------------- reader

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumKey {
    pub conspicuity: usize,
    pub density_bin: usize,
    pub family_history: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumRates {
    #[serde(flatten)]
    pub key: StratumKey,
    pub fnr: f64,
    pub fpr: f64,
}

/// Simulated radiologist: error rates per stratum plus annotation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderProfile {
    pub strata: Vec<StratumRates>,
    /// Probability that each categorical annotation is perturbed.
    pub annotation_noise: f64,
    /// Standard deviation of density annotations (VAS points).
    pub density_noise: f64,
}

/// Aggregate radiologist rates the default profile is calibrated to.
pub const DEFAULT_FNR: f64 = 36.0 / 156.0;
pub const DEFAULT_FPR: f64 = 42.0 / 844.0;

impl ReaderProfile {
    /// Uniform rates in every stratum.
    pub fn uniform(fnr: f64, fpr: f64) -> Self {
        Self::from_fn(|_| (fnr, fpr))
    }

    pub fn from_fn(f: impl Fn(StratumKey) -> (f64, f64)) -> Self {
        let mut strata = Vec::new();
        for conspicuity in 0..NUM_CONSPICUITY {
            for density_bin in 0..4 {
                for family_history in [false, true] {
                    let key = StratumKey { conspicuity, density_bin, family_history };
                    let (fnr, fpr) = f(key);
                    strata.push(StratumRates { key, fnr, fpr });
                }
            }
        }
        Self { strata, annotation_noise: 0.0, density_noise: 0.0 }
    }

    /// Aggregate `fnr` / `fpr` modulated by +-50 % across conspicuity: faint
    /// cancers are missed more often and visible benign findings recalled
    /// more often. Multipliers are renormalized under the class-conditional
    /// conspicuity distribution so the expected aggregate rates are exact.
    pub fn calibrated(cfg: &StrataConfig, fnr: f64, fpr: f64) -> Self {
        let miss = [1.5, 1.5 - 1.0 / 3.0, 0.5 + 1.0 / 3.0, 0.5];
        let recall = [0.5, 0.5 + 1.0 / 3.0, 1.5 - 1.0 / 3.0, 1.5];
        let norm = |m: &[f64; 4], p: &[f64]| m.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        let zm = norm(&miss, &cfg.conspicuity_given(true));
        let zr = norm(&recall, &cfg.conspicuity_given(false));
        let mut p = Self::from_fn(|k| {
            ((fnr * miss[k.conspicuity] / zm).min(1.0), (fpr * recall[k.conspicuity] / zr).min(1.0))
        });
        p.annotation_noise = 0.1;
        p.density_noise = 3.0;
        p
    }

    pub fn default_for(cfg: &StrataConfig) -> Self {
        Self::calibrated(cfg, DEFAULT_FNR, DEFAULT_FPR)
    }

    pub fn rates(&self, key: StratumKey) -> Result<(f64, f64)> {
        self.strata
            .iter()
            .find(|s| s.key == key)
            .map(|s| (s.fnr, s.fpr))
            .ok_or_else(|| Error::UnknownStratum(format!("{key:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if self.strata.iter().any(|s| !ok(s.fnr) || !ok(s.fpr)) || !ok(self.annotation_noise) {
            return Err(Error::InvalidProportions("reader rates must be in [0, 1]".into()));
        }
        if !(self.density_noise >= 0.0) {
            return Err(Error::InvalidProportions("density_noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Expected aggregate (FNR, FPR) under a strata config; strata with
    /// differing density bin or family history are weighted by sampling.
    pub fn expected_rates(&self, cfg: &StrataConfig) -> Result<(f64, f64)> {
        let (mut fnr, mut fpr) = (0.0, 0.0);
        let cm = cfg.conspicuity_given(true);
        let cb = cfg.conspicuity_given(false);
        let dm = &cfg.density.cancer;
        let db = cfg.density.benign(cfg.prevalence);
        // family history is ignored when every stratum shares rates across it
        for c in 0..NUM_CONSPICUITY {
            for d in 0..4 {
                let k = StratumKey { conspicuity: c, density_bin: d, family_history: false };
                let (n, p) = self.rates(k)?;
                fnr += cm[c] * dm[d] * n;
                fpr += cb[c] * db[d] * p;
            }
        }
        Ok((fnr, fpr))
    }
}

/// What the radiologist reports for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub diagnosis: bool,
    pub sign: Sign,
    pub suspicion: usize,
    pub conspicuity: usize,
    pub densities: [f64; 4],
}

fn shift_adjacent(v: usize, levels: usize, rng: &mut Rng) -> usize {
    if v == 0 {
        1
    } else if v + 1 == levels || rng.random_bool(0.5) {
        v - 1
    } else {
        v + 1
    }
}

pub fn simulate_radiologist(truth: &PatientTruth, profile: &ReaderProfile, seed: u64) -> Result<Reading> {
    let (fnr, fpr) = profile.rates(truth.stratum())?;
    let mut rng = rng::rng(seed);
    let flip = rng.random_bool(if truth.malignant { fnr } else { fpr });
    let diagnosis = truth.malignant != flip;
    let noise = profile.annotation_noise;
    let mut sign = truth.sign;
    let mut suspicion = truth.suspicion();
    let mut conspicuity = truth.conspicuity;
    if sign != Sign::None {
        if rng.random_bool(noise) {
            let others: Vec<Sign> = Sign::LESIONS.iter().copied().filter(|&s| s != sign).collect();
            sign = *others.choose(&mut rng).expect("non-empty");
        }
        if rng.random_bool(noise) {
            conspicuity = shift_adjacent(conspicuity, NUM_CONSPICUITY, &mut rng);
        }
        if rng.random_bool(noise) {
            suspicion = shift_adjacent(suspicion, NUM_SUSPICION, &mut rng).max(1);
        }
    }
    let mut densities = truth.densities;
    if profile.density_noise > 0.0 {
        let n = Normal::new(0.0, profile.density_noise).expect("valid sigma");
        for d in densities.iter_mut() {
            *d = round6((*d + n.sample(&mut rng)).clamp(0.0, 100.0));
        }
    }
    Ok(Reading { diagnosis, sign, suspicion, conspicuity, densities })
}

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub age: u32,
    pub family_history: bool,
    pub recall_type: RecallType,
    /// Annotated per-view densities, canonical view order.
    pub densities: [f64; 4],
    pub sign: Sign,
    pub suspicion: usize,
    pub conspicuity: usize,
    pub outcome: bool,
    pub rad_diagnosis: bool,
    pub views: [ImageU8; 4],
}

impl PatientRecord {
    pub fn view(&self, v: View) -> &ImageU8 {
        &self.views[v as usize]
    }

    pub fn density_bin(&self) -> usize {
        density_bin(self.densities.iter().sum::<f64>() / 4.0)
    }
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:06}")
}

/// Truth plus reading for every patient, without rendering images.
pub fn sample_population(
    n: usize,
    cfg: &StrataConfig,
    profile: &ReaderProfile,
    seed: u64,
) -> Result<Vec<(PatientTruth, Reading)>> {
    cfg.validate()?;
    profile.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive(seed, &[i as u64]);
            let t = sample_truth(cfg, s);
            Ok((t, simulate_radiologist(&t, profile, derive(s, &[2]))?))
        })
        .collect()
}

pub fn render_views(truth: &PatientTruth, cfg: &StrataConfig) -> [ImageU8; 4] {
    let mut rng = rng::rng(derive(truth.seed, &[20]));
    View::ALL.map(|v| {
        let overlap = rng.random_bool(cfg.overlap_rate);
        generate_phantom(&truth.phantom_spec(v, overlap)).0.to_u8()
    })
}

pub fn generate_cohort(n: usize, cfg: &StrataConfig, profile: &ReaderProfile, seed: u64) -> Result<Vec<PatientRecord>> {
    let pop = sample_population(n, cfg, profile, seed)?;
    Ok(pop
        .par_iter()
        .enumerate()
        .map(|(i, (t, r))| PatientRecord {
            id: patient_id(i),
            age: t.age,
            family_history: t.family_history,
            recall_type: t.recall_type,
            densities: r.densities,
            sign: r.sign,
            suspicion: r.suspicion,
            conspicuity: r.conspicuity,
            outcome: t.malignant,
            rad_diagnosis: r.diagnosis,
            views: render_views(t, cfg),
        })
        .collect())
}

// ---------------------------------------------------------------- partition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// stage1, stage2, stage3, validation
    pub fractions: [f64; 4],
    pub holdout: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.60, 0.15, 0.15, 0.10], holdout: 1000, seed: 0 }
    }
}

/// Disjoint index sets covering the cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub holdout: Vec<usize>,
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    pub stage3: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Partition {
    pub fn sizes(&self) -> [usize; 5] {
        [self.holdout.len(), self.stage1.len(), self.stage2.len(), self.stage3.len(), self.validation.len()]
    }

    pub fn parts(&self) -> [&[usize]; 5] {
        [&self.holdout, &self.stage1, &self.stage2, &self.stage3, &self.validation]
    }
}

/// The holdout is drawn first; the rest is split by flooring each of
/// stage2, stage3 and validation, with the residue going to stage1.
pub fn partition(n: usize, split: &SplitSpec) -> Result<Partition> {
    check_distribution("split fractions", &split.fractions, 4).map_err(|e| Error::Config(e.to_string()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_for(split.seed, &[0x5911]));
    if n < split.holdout {
        return Err(Error::CohortTooSmall(format!("{n} patients, holdout {}", split.holdout)));
    }
    let m = n - split.holdout;
    let floor = |f: f64| (f * m as f64).floor() as usize;
    let (s2, s3, sv) = (floor(split.fractions[1]), floor(split.fractions[2]), floor(split.fractions[3]));
    let s1 = m - s2 - s3 - sv;
    if [s1, s2, s3, sv].contains(&0) {
        return Err(Error::CohortTooSmall(format!("{n} patients leave an empty split")));
    }
    let mut rest = idx.split_off(split.holdout);
    let take = |v: &mut Vec<usize>, k: usize| {
        let tail = v.split_off(k);
        let mut head = std::mem::replace(v, tail);
        head.sort_unstable();
        head
    };
    let mut holdout = idx;
    holdout.sort_unstable();
    Ok(Partition {
        holdout,
        stage1: take(&mut rest, s1),
        stage2: take(&mut rest, s2),
        stage3: take(&mut rest, s3),
        validation: take(&mut rest, sv),
    })
}

// ---------------------------------------------------------------- csv

pub const CSV_HEADER: [&str; 17] = [
    "id",
    "age",
    "family_history",
    "recall_type",
    "density_mlo_r",
    "density_mlo_l",
    "density_cc_r",
    "density_cc_l",
    "sign",
    "suspicion",
    "conspicuity",
    "outcome",
    "rad_diagnosis",
    "img_mlo_r",
    "img_mlo_l",
    "img_cc_r",
    "img_cc_l",
];

/// Shortest decimal form of a value stored at 6 significant digits.
pub fn fmt6(v: f64) -> String {
    format!("{}", round6(v))
}

pub fn image_path(id: &str, view: View) -> String {
    format!("images/{id}_{}.pgm", view.name())
}

/// Writes `csv_path` plus one PGM per view beside it under `images/`.
pub fn save_cohort(csv_path: &Path, records: &[PatientRecord]) -> Result<()> {
    let root = csv_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(root.join("images"))?;
    records.par_iter().try_for_each(|r| -> Result<()> {
        for v in View::ALL {
            r.view(v).save_pgm(&root.join(image_path(&r.id, v)))?;
        }
        Ok(())
    })?;
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(CSV_HEADER)?;
    let b = |v: bool| if v { "1" } else { "0" }.to_string();
    for r in records {
        let mut row = vec![r.id.clone(), r.age.to_string(), b(r.family_history), r.recall_type.to_string()];
        row.extend(r.densities.iter().map(|&d| fmt6(d)));
        row.extend([
            r.sign.to_string(),
            r.suspicion.to_string(),
            r.conspicuity.to_string(),
            b(r.outcome),
            b(r.rad_diagnosis),
        ]);
        row.extend(View::ALL.map(|v| image_path(&r.id, v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

struct RowReader<'a> {
    row: &'a csv::StringRecord,
    cols: &'a BTreeMap<&'static str, usize>,
    line: u64,
}

impl RowReader<'_> {
    fn raw(&self, name: &'static str) -> &str {
        &self.row[self.cols[name]]
    }

    fn parse<T: FromStr>(&self, name: &'static str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.raw(name)
            .trim()
            .parse()
            .map_err(|e| Error::MalformedRow { line: self.line, msg: format!("{name}: {e}") })
    }

    fn flag(&self, name: &'static str) -> Result<bool> {
        match self.raw(name).trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(Error::MalformedRow { line: self.line, msg: format!("{name}: expected 0/1, got '{other}'") }),
        }
    }

    fn bounded(&self, name: &'static str, levels: usize) -> Result<usize> {
        let v: usize = self.parse(name)?;
        if v >= levels {
            return Err(Error::MalformedRow { line: self.line, msg: format!("{name}: {v} out of range") });
        }
        Ok(v)
    }
}

pub fn load_cohort(csv_path: &Path) -> Result<Vec<PatientRecord>> {
    let root: PathBuf = csv_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
    let headers = rdr.headers()?.clone();
    let mut cols = BTreeMap::new();
    for name in CSV_HEADER {
        let pos = headers.iter().position(|h| h.trim() == name).ok_or(Error::MissingColumn(name.to_string()))?;
        cols.insert(name, pos);
    }
    let mut rows = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::MalformedRow { line, msg: e.to_string() })?;
        if row.len() < headers.len() {
            return Err(Error::MalformedRow { line, msg: format!("{} fields, expected {}", row.len(), headers.len()) });
        }
        rows.push((line, row));
    }
    rows.par_iter()
        .map(|(line, row)| {
            let r = RowReader { row, cols: &cols, line: *line };
            let mut densities = [0.0; 4];
            for (d, name) in densities.iter_mut().zip(["density_mlo_r", "density_mlo_l", "density_cc_r", "density_cc_l"]) {
                *d = r.parse(name)?;
                if !(0.0..=100.0).contains(d) {
                    return Err(Error::MalformedRow { line: *line, msg: format!("{name} outside [0, 100]") });
                }
            }
            let mut views = Vec::with_capacity(4);
            for name in ["img_mlo_r", "img_mlo_l", "img_cc_r", "img_cc_l"] {
                let p = root.join(r.raw(name).trim());
                views.push(ImageU8::load_pgm(&p).map_err(|e| Error::MalformedRow {
                    line: *line,
                    msg: format!("{name} ({}): {e}", p.display()),
                })?);
            }
            Ok(PatientRecord {
                id: r.raw("id").trim().to_string(),
                age: r.parse("age")?,
                family_history: r.flag("family_history")?,
                recall_type: r.parse("recall_type")?,
                densities,
                sign: r.parse("sign")?,
                suspicion: r.bounded("suspicion", NUM_SUSPICION)?,
                conspicuity: r.bounded("conspicuity", NUM_CONSPICUITY)?,
                outcome: r.flag("outcome")?,
                rad_diagnosis: r.flag("rad_diagnosis")?,
                views: views.try_into().expect("four views"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_sign_means_empty_mask() {
        let (_, mask) = generate_phantom(&PhantomSpec { seed: 4, ..PhantomSpec::default() });
        assert!(mask.iter().all(|m| !m));
        let spec = PhantomSpec { sign: Sign::Spiculated, conspicuity: 3, seed: 4, ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).1.iter().any(|&m| m));
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec { sign: Sign::Distortion, conspicuity: 2, overlap: true, seed: 9, ..Default::default() };
        assert_eq!(generate_phantom(&spec), generate_phantom(&spec));
    }

    #[test]
    fn every_lesion_type_draws_a_mask() {
        for &sign in &Sign::LESIONS {
            for seed in 0..20 {
                let spec = PhantomSpec { sign, conspicuity: 1, seed, ..Default::default() };
                assert!(generate_phantom(&spec).1.iter().any(|&m| m), "{sign} seed {seed}");
            }
        }
    }

    #[test]
    fn mirrored_views_flip() {
        let spec = PhantomSpec { sign: Sign::Circumscribed, conspicuity: 3, seed: 3, ..Default::default() };
        let (a, ma) = generate_phantom(&spec);
        let (b, mb) = generate_phantom(&PhantomSpec { mirrored: true, ..spec });
        assert_eq!(a.get(0, 10), b.get(VIEW_WIDTH - 1, 10));
        assert_eq!(ma.iter().filter(|&&m| m).count(), mb.iter().filter(|&&m| m).count());
    }

    #[test]
    fn suspicion_rule_examples() {
        assert_eq!(suspicion_rule(Sign::None, 3, true), 0);
        assert_eq!(suspicion_rule(Sign::Circumscribed, 0, false), 1);
        assert_eq!(suspicion_rule(Sign::Spiculated, 3, true), 4);
        assert_eq!(suspicion_rule(Sign::MicroCalcification, 2, false), 3);
    }

    #[test]
    fn default_strata_are_valid_and_benign_columns_positive() {
        let cfg = StrataConfig::default();
        cfg.validate().unwrap();
        for m in [&cfg.age, &cfg.density, &cfg.sign] {
            assert!(m.benign(cfg.prevalence).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn default_profile_is_calibrated_in_expectation() {
        let cfg = StrataConfig::default();
        let (fnr, fpr) = ReaderProfile::default_for(&cfg).expected_rates(&cfg).unwrap();
        assert!((fnr - DEFAULT_FNR).abs() < 1e-12);
        assert!((fpr - DEFAULT_FPR).abs() < 1e-12);
    }

    #[test]
    fn unknown_stratum_errors() {
        let mut p = ReaderProfile::uniform(0.1, 0.1);
        p.strata.retain(|s| s.key.conspicuity != 2);
        let t = PatientTruth { conspicuity: 2, ..sample_truth(&StrataConfig::default(), 1) };
        assert!(matches!(simulate_radiologist(&t, &p, 0), Err(Error::UnknownStratum(_))));
    }

    #[test]
    fn round6_is_idempotent_through_text() {
        for v in [43.21094, 0.000123456789, 99.99999, 7.0, 12.3456789] {
            let r = round6(v);
            assert_eq!(fmt6(r).parse::<f64>().unwrap().to_bits(), r.to_bits());
            assert_eq!(round6(r), r);
        }
    }

    #[test]
    fn density_and_age_bins() {
        assert_eq!(density_bin(0.0), 0);
        assert_eq!(density_bin(24.99), 0);
        assert_eq!(density_bin(25.0), 1);
        assert_eq!(density_bin(100.0), 3);
        assert_eq!(age_bin(40), 0);
        assert_eq!(age_bin(59), 1);
        assert_eq!(age_bin(73), 3);
    }

    #[test]
    fn names_round_trip() {
        for &s in Sign::ALL {
            assert_eq!(s.name().parse::<Sign>().unwrap(), s);
            assert_eq!(s.index().to_string().parse::<Sign>().unwrap(), s);
        }
        assert!("blob".parse::<Sign>().is_err());
        assert_eq!("two_readers".parse::<RecallType>().unwrap(), RecallType::TwoReaders);
    }
}
