//! View preprocessing and augmentation: random geometry, randomized CLAHE,
//! Gaussian noise, standardization and Lanczos downscaling, plus 8-bit PGM
//! input/output.
//!
//! Pipeline images hold real intensities, nominally in `[0, 1]` until
//! standardization. Stored images are 8-bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Model input width (preserves the 1:1.3 aspect of the full-size views).
pub const VIEW_WIDTH: usize = 40;
pub const VIEW_HEIGHT: usize = 52;
pub const VIEW_PIXELS: usize = VIEW_WIDTH * VIEW_HEIGHT;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, got: pixels.len() });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::MalformedImage("non-finite pixel".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.pixels.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / self.pixels.len() as f64).sqrt()
    }

    /// Shannon entropy (bits) of a 256-bin histogram over `[0, 1]`.
    pub fn entropy(&self) -> f64 {
        let mut hist = [0usize; 256];
        for &p in &self.pixels {
            hist[bin(p)] += 1;
        }
        let n = self.pixels.len() as f64;
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let q = c as f64 / n;
                -q * q.log2()
            })
            .sum()
    }

    pub fn to_u8(&self) -> ImageU8 {
        ImageU8 {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

#[inline]
fn bin(p: f64) -> usize {
    (p.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// 8-bit stored image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_pgm(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between tokens
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::MalformedImage("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_owned));
        }
        if header.len() != 4 || header[0] != "P5" {
            return Err(Error::MalformedImage(format!("unsupported PGM header {header:?}")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::MalformedImage(format!("bad header field {s}")));
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(Error::MalformedImage(format!("maxval {maxval} (only 8-bit supported)")));
        }
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels).map_err(|_| Error::MalformedImage("truncated PGM raster".into()))?;
        Ok(Self { width, height, pixels })
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaheMode {
    Off,
    /// Nominal grid and clip, no randomization.
    Nominal,
    /// Grid and clip drawn around the nominal values on every call.
    Randomized,
}

/// How the final pipeline step rescales intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Standardization {
    /// Zero mean, unit variance per image.
    #[default]
    PerImage,
    /// Fixed statistics, typically measured over the training set.
    Dataset { mean: f64, std: f64 },
}

impl Standardization {
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        match *self {
            Standardization::PerImage => standardize(img),
            Standardization::Dataset { mean, std } => standardize_with(img, mean, std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    /// Degrees.
    pub max_rotation: f64,
    pub max_shear: f64,
    pub max_zoom: f64,
    /// Fraction of the image size.
    pub max_shift: f64,
    pub clahe: ClaheMode,
    pub clahe_grid: u32,
    pub clahe_clip: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub standardization: Standardization,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            allow_hflip: true,
            allow_vflip: true,
            max_rotation: 20.0,
            max_shear: 0.2,
            max_zoom: 0.2,
            max_shift: 0.2,
            clahe: ClaheMode::Randomized,
            clahe_grid: 4,
            clahe_clip: 2.0,
            noise_sigma: 0.01,
            standardization: Standardization::PerImage,
        }
    }
}

impl AugmentSpec {
    /// No augmentation at all: the pipeline reduces to standardization.
    pub fn disabled() -> Self {
        Self {
            allow_hflip: false,
            allow_vflip: false,
            max_rotation: 0.0,
            max_shear: 0.0,
            max_zoom: 0.0,
            max_shift: 0.0,
            clahe: ClaheMode::Off,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    /// Deterministic preprocessing matching the training pipeline without
    /// its random parts: nominal CLAHE then standardization.
    pub fn inference(&self) -> Self {
        Self {
            clahe: if self.clahe == ClaheMode::Off { ClaheMode::Off } else { ClaheMode::Nominal },
            clahe_grid: self.clahe_grid,
            clahe_clip: self.clahe_clip,
            standardization: self.standardization,
            ..Self::disabled()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let maxima = [self.max_rotation, self.max_shear, self.max_zoom, self.max_shift, self.noise_sigma];
        if maxima.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::Config("augmentation maxima must be finite and >= 0".into()));
        }
        if self.clahe_grid < 2 || !(self.clahe_clip > 0.0) {
            return Err(Error::Config("CLAHE needs grid >= 2 and clip > 0".into()));
        }
        if self.max_zoom >= 1.0 {
            return Err(Error::Config("max_zoom must be < 1".into()));
        }
        Ok(())
    }

    pub fn is_random(&self) -> bool {
        self.allow_hflip
            || self.allow_vflip
            || self.max_rotation > 0.0
            || self.max_shear > 0.0
            || self.max_zoom > 0.0
            || self.max_shift > 0.0
            || self.clahe == ClaheMode::Randomized
            || self.noise_sigma > 0.0
    }
}

/// One realization of the geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub shear: f64,
    pub zoom: f64,
    /// Fractions of width / height.
    pub shift_x: f64,
    pub shift_y: f64,
}

impl GeometryDraw {
    pub const IDENTITY: Self =
        Self { hflip: false, vflip: false, rotation_deg: 0.0, shear: 0.0, zoom: 1.0, shift_x: 0.0, shift_y: 0.0 };

    /// Independent uniform draw for every transform, in a fixed order.
    pub fn sample(spec: &AugmentSpec, rng: &mut Rng) -> Self {
        let mut sym = |m: f64| m * (2.0 * rng.random::<f64>() - 1.0);
        let rotation_deg = sym(spec.max_rotation);
        let shear = sym(spec.max_shear);
        let zoom = 1.0 + sym(spec.max_zoom);
        let shift_x = sym(spec.max_shift);
        let shift_y = sym(spec.max_shift);
        let hflip = rng.random_bool(0.5) && spec.allow_hflip;
        let vflip = rng.random_bool(0.5) && spec.allow_vflip;
        Self { hflip, vflip, rotation_deg, shear, zoom, shift_x, shift_y }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Applies a drawn geometric transform: bilinear sampling, out-of-bounds
/// pixels filled with the image mean, output size unchanged.
pub fn apply_geometry(img: &GrayImage, g: &GeometryDraw) -> GrayImage {
    if g.is_identity() {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let fill = img.mean();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = g.rotation_deg.to_radians().sin_cos();
    let (tx, ty) = (g.shift_x * w as f64, g.shift_y * h as f64);
    let pure_flip = g.rotation_deg == 0.0 && g.shear == 0.0 && g.zoom == 1.0 && tx == 0.0 && ty == 0.0;
    let mut out = GrayImage::filled(w, h, fill);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (if g.hflip { w - 1 - x } else { x }, if g.vflip { h - 1 - y } else { y });
            if pure_flip {
                out.set(x, y, img.get(fx, fy));
                continue;
            }
            // output -> source: undo shift, rotation, shear, then zoom
            let (u, v) = (fx as f64 - cx - tx, fy as f64 - cy - ty);
            let (u, v) = (cos * u + sin * v, -sin * u + cos * v);
            let u = u - g.shear * v;
            let (sx, sy) = (u / g.zoom + cx, v / g.zoom + cy);
            if let Some(val) = bilinear(img, sx, sy) {
                out.set(x, y, val);
            }
        }
    }
    out
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> Option<f64> {
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(x0, y0) * (1.0 - ax) + img.get(x1, y0) * ax;
    let bottom = img.get(x0, y1) * (1.0 - ax) + img.get(x1, y1) * ax;
    Some(top * (1.0 - ay) + bottom * ay)
}

pub fn augment_geometry(img: &GrayImage, spec: &AugmentSpec, seed: u64) -> GrayImage {
    let mut r = rng::rng(seed);
    apply_geometry(img, &GeometryDraw::sample(spec, &mut r))
}

/// Maps two unit draws to a CLAHE `(grid, clip)` pair around the nominal
/// `(k, l)`: `g = round(k + a)` with `a ~ U(-log2 k, log2 k)`, clamped to
/// at least 2; `c = l + a'` with `a' ~ U(-|log2 l|, |log2 l|)`, clamped
/// to at least [`MIN_CLIP`].
pub fn clahe_params_from_unit(k: u32, l: f64, u_grid: f64, u_clip: f64) -> (u32, f64) {
    let span_g = (k as f64).log2();
    let a = span_g * (2.0 * u_grid - 1.0);
    let g = ((k as f64 + a).round() as i64).max(2) as u32;
    let span_c = l.log2().abs();
    let c = (l + span_c * (2.0 * u_clip - 1.0)).max(MIN_CLIP);
    (g, c)
}

pub const MIN_CLIP: f64 = 0.01;

pub fn clahe_params(k: u32, l: f64, rng: &mut Rng) -> (u32, f64) {
    let (u1, u2) = (rng.random::<f64>(), rng.random::<f64>());
    clahe_params_from_unit(k, l, u1, u2)
}

/// Clips a normalized histogram at `ceiling` and returns it with the clipped excess.
pub fn clip_histogram(hist: &[f64], ceiling: f64) -> (Vec<f64>, f64) {
    let mut excess = 0.0;
    let clipped = hist
        .iter()
        .map(|&h| {
            if h > ceiling {
                excess += h - ceiling;
                ceiling
            } else {
                h
            }
        })
        .collect();
    (clipped, excess)
}

fn tile_bounds(n: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * n / tiles).collect()
}

/// Contrast-limited adaptive histogram equalization on a `grid x grid` tiling.
///
/// Tile histograms (256 bins) are normalized to unit mass and clipped at
/// `clip / 256`; the excess is spread uniformly over all bins. Each pixel
/// maps through the bilinear blend of its four nearest tile CDFs.
pub fn clahe(img: &GrayImage, grid: u32, clip: f64) -> Result<GrayImage> {
    let g = grid as usize;
    if g < 2 || !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("CLAHE grid {grid}, clip {clip}")));
    }
    if img.width < g || img.height < g {
        return Err(Error::ImageSmallerThanGrid);
    }
    let xb = tile_bounds(img.width, g);
    let yb = tile_bounds(img.height, g);
    let ceiling = clip / 256.0;
    let mut luts = vec![[0f64; 256]; g * g];
    for ty in 0..g {
        for tx in 0..g {
            let mut hist = [0f64; 256];
            for y in yb[ty]..yb[ty + 1] {
                for x in xb[tx]..xb[tx + 1] {
                    hist[bin(img.get(x, y))] += 1.0;
                }
            }
            let area = ((xb[tx + 1] - xb[tx]) * (yb[ty + 1] - yb[ty])) as f64;
            hist.iter_mut().for_each(|h| *h /= area);
            let (clipped, excess) = clip_histogram(&hist, ceiling);
            debug_assert!(clipped.iter().all(|&h| h <= ceiling));
            let spread = excess / 256.0;
            let lut = &mut luts[ty * g + tx];
            let mut acc = 0.0;
            for (b, h) in clipped.iter().enumerate() {
                acc += h + spread;
                lut[b] = acc.min(1.0);
            }
        }
    }
    // tile centers
    let cxs: Vec<f64> = (0..g).map(|t| (xb[t] + xb[t + 1]) as f64 / 2.0 - 0.5).collect();
    let cys: Vec<f64> = (0..g).map(|t| (yb[t] + yb[t + 1]) as f64 / 2.0 - 0.5).collect();
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        if p >= c[g - 1] {
            return (g - 1, g - 1, 0.0);
        }
        let i = c.iter().rposition(|&v| v <= p).unwrap_or(0);
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };
    let xs: Vec<_> = (0..img.width).map(|x| locate(&cxs, x as f64)).collect();
    let mut out = GrayImage::filled(img.width, img.height, 0.0);
    for y in 0..img.height {
        let (y0, y1, ay) = locate(&cys, y as f64);
        for (x, &(x0, x1, ax)) in xs.iter().enumerate() {
            let b = bin(img.get(x, y));
            let top = luts[y0 * g + x0][b] * (1.0 - ax) + luts[y0 * g + x1][b] * ax;
            let bottom = luts[y1 * g + x0][b] * (1.0 - ax) + luts[y1 * g + x1][b] * ax;
            out.set(x, y, (top * (1.0 - ay) + bottom * ay).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise.
pub fn gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut r = rng::rng(seed);
    add_noise(img, sigma, &mut r)
}

fn add_noise(img: &GrayImage, sigma: f64, r: &mut Rng) -> GrayImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(r);
            p + sigma * z
        })
        .collect();
    GrayImage { pixels, ..*img }
}

/// Per-image zero mean, unit variance. Constant images map to zeros.
pub fn standardize(img: &GrayImage) -> GrayImage {
    let (m, s) = (img.mean(), img.std());
    standardize_with(img, m, s)
}

/// Standardization with precomputed (e.g. dataset-level) statistics.
pub fn standardize_with(img: &GrayImage, mean: f64, std: f64) -> GrayImage {
    let pixels = if std > 1e-12 {
        img.pixels.iter().map(|p| (p - mean) / std).collect()
    } else {
        vec![0.0; img.pixels.len()]
    };
    GrayImage { pixels, ..*img }
}

fn lanczos3(x: f64) -> f64 {
    const A: f64 = 3.0;
    if x == 0.0 {
        1.0
    } else if x.abs() >= A {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        A * px.sin() * (px / A).sin() / (px * px)
    }
}

/// Normalized Lanczos-3 taps for one output coordinate of a 1-D downscale.
fn lanczos_taps(out_i: usize, factor: usize, n: usize) -> Vec<(usize, f64)> {
    let f = factor as f64;
    let center = (out_i as f64 + 0.5) * f - 0.5;
    let support = 3.0 * f;
    let lo = (center - support).floor().max(0.0) as usize;
    let hi = ((center + support).ceil() as usize).min(n - 1);
    let mut taps: Vec<(usize, f64)> = (lo..=hi).map(|j| (j, lanczos3((j as f64 - center) / f))).collect();
    let s: f64 = taps.iter().map(|t| t.1).sum();
    taps.iter_mut().for_each(|t| t.1 /= s);
    taps
}

/// Separable Lanczos-3 downscale by an integer factor (anti-aliased: the
/// kernel is stretched by `factor`).
pub fn lanczos_downscale(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::NotDivisible { width: img.width, height: img.height, factor });
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let xt: Vec<_> = (0..ow).map(|i| lanczos_taps(i, factor, img.width)).collect();
    let yt: Vec<_> = (0..oh).map(|i| lanczos_taps(i, factor, img.height)).collect();
    let mut rows = vec![0.0; ow * img.height];
    for y in 0..img.height {
        for (ox, taps) in xt.iter().enumerate() {
            rows[y * ow + ox] = taps.iter().map(|&(x, w)| w * img.get(x, y)).sum();
        }
    }
    let mut out = GrayImage::filled(ow, oh, 0.0);
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..ow {
            out.set(ox, oy, taps.iter().map(|&(y, w)| w * rows[y * ow + ox]).sum());
        }
    }
    Ok(out)
}

/// geometry -> CLAHE -> noise -> standardize, all randomness derived from `seed`.
pub fn full_pipeline(img: &GrayImage, spec: &AugmentSpec, seed: u64) -> Result<GrayImage> {
    let mut r = rng::rng(seed);
    let geo = GeometryDraw::sample(spec, &mut r);
    let mut out = apply_geometry(img, &geo);
    match spec.clahe {
        ClaheMode::Off => {}
        ClaheMode::Nominal => out = clahe(&out, spec.clahe_grid, spec.clahe_clip)?,
        ClaheMode::Randomized => {
            let (g, c) = clahe_params(spec.clahe_grid, spec.clahe_clip, &mut r);
            out = clahe(&out, g, c)?;
        }
    }
    if spec.noise_sigma > 0.0 {
        out = add_noise(&out, spec.noise_sigma, &mut r);
    }
    Ok(spec.standardization.apply(&out))
}

/// Pooled pixel mean and standard deviation of `images` after the
/// deterministic part of `spec` (nominal CLAHE).
pub fn dataset_standardization<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    spec: &AugmentSpec,
) -> Result<Standardization> {
    let pre = spec.inference();
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for img in images {
        let out = match pre.clahe {
            ClaheMode::Off => img.clone(),
            _ => clahe(img, pre.clahe_grid, pre.clahe_clip)?,
        };
        for &p in &out.pixels {
            n += 1;
            sum += p;
            sq += p * p;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = sum / n as f64;
    Ok(Standardization::Dataset { mean, std: (sq / n as f64 - mean * mean).max(0.0).sqrt() })
}
