//! Synthetic shape datasets, controlled corruption of masks and the
//! `CRSPDS01` dataset file format.
//!
//! Each sample is a filled ellipse (class 1) on background (class 0). With
//! three classes the ellipse is wrapped in a ring (class 2). Image
//! intensities overlap between classes so that shape, not brightness alone,
//! identifies the structure.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::mask::Mask;
use crate::morphology;

pub const DATASET_MAGIC: &[u8; 8] = b"CRSPDS01";
/// Bytes before the first sample payload.
pub const DATASET_HEADER_LEN: usize = 8 + 4 * 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major `H×W` intensities in `[0,1]`.
    pub image: Vec<f64>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }

    /// Concatenates datasets of identical geometry. The seed of the first
    /// part is kept.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| CrispError::Input("no datasets to concatenate".into()))?;
        let mut samples = Vec::new();
        for d in parts {
            if (d.height, d.width, d.num_classes) != (first.height, first.width, first.num_classes) {
                return Err(CrispError::Dimension(
                    "datasets with different geometry".into(),
                ));
            }
            samples.extend(d.samples.iter().cloned());
        }
        Ok(Dataset {
            samples,
            height: first.height,
            width: first.width,
            num_classes: first.num_classes,
            seed: first.seed,
        })
    }
}

/// Appearance parameters of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub noise_sigma: f64,
    /// Mean intensity for background, structure and ring.
    pub intensities: [f64; 3],
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            intensities: [0.2, 0.7, 0.45],
        }
    }
}

/// Geometry of one generated shape, in pixel units. Pixel `(y, x)` is
/// sampled at its integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let (dy, dx) = (y - self.center_y, x - self.center_x);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / (self.semi_a + grow);
        let v = (-dx * s + dy * c) / (self.semi_b + grow);
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_a * self.semi_b
    }
}

/// Labels pixels inside `ellipse` as 1 and, when `ring` is given, pixels
/// within `ring` pixels outside it as 2.
pub fn rasterize(height: usize, width: usize, num_classes: usize, ellipse: &Ellipse, ring: Option<f64>) -> Mask {
    let mut mask = Mask::background(height, width, num_classes);
    let labels = mask.labels_mut();
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            labels[y * width + x] = if ellipse.contains(fy, fx, 0.0) {
                1
            } else if ring.is_some_and(|t| ellipse.contains(fy, fx, t)) {
                2
            } else {
                0
            };
        }
    }
    mask
}

fn validate_geometry(height: usize, width: usize, num_classes: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(CrispError::Config(format!(
            "images must be at least 16x16, got {height}x{width}"
        )));
    }
    if !(2..=3).contains(&num_classes) {
        return Err(CrispError::Config(format!(
            "num_classes must be 2 or 3, got {num_classes}"
        )));
    }
    Ok(())
}

fn random_ellipse(rng: &mut ChaCha8Rng, height: usize, width: usize) -> (Ellipse, f64) {
    let side = height.min(width) as f64;
    let ellipse = Ellipse {
        center_y: (height as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * height as f64,
        center_x: (width as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * width as f64,
        semi_a: rng.gen_range(0.16..0.26) * side,
        semi_b: rng.gen_range(0.16..0.26) * side,
        angle: rng.gen_range(0.0..PI),
    };
    let ring = rng.gen_range(1.5..3.0) * side / 32.0;
    (ellipse, ring)
}

pub fn generate_dataset(count: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_with(count, height, width, num_classes, seed, &ShapeConfig::default())
}

pub fn generate_dataset_with(
    count: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    shape: &ShapeConfig,
) -> Result<Dataset> {
    if count == 0 {
        return Err(CrispError::Config("dataset must contain at least one sample".into()));
    }
    validate_geometry(height, width, num_classes)?;
    if !(shape.noise_sigma >= 0.0 && shape.noise_sigma.is_finite()) {
        return Err(CrispError::Config(format!("invalid noise sigma {}", shape.noise_sigma)));
    }
    let noise = Normal::new(0.0, shape.noise_sigma)
        .map_err(|e| CrispError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let (ellipse, ring) = random_ellipse(&mut rng, height, width);
            let mask = rasterize(height, width, num_classes, &ellipse, (num_classes == 3).then_some(ring));
            let image = mask
                .labels()
                .iter()
                .map(|&l| {
                    let v = shape.intensities[l as usize] + noise.sample(&mut rng);
                    v.clamp(0.0, 1.0)
                })
                .collect();
            Sample { image, mask }
        })
        .collect();
    Ok(Dataset {
        samples,
        height,
        width,
        num_classes,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Dilate,
    Erode,
    Shift,
    Hole,
    None,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 4] = [Self::Dilate, Self::Erode, Self::Shift, Self::Hole];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dilate => "dilate",
            Self::Erode => "erode",
            Self::Shift => "shift",
            Self::Hole => "hole",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for CorruptionMode {
    type Err = CrispError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dilate" => Ok(Self::Dilate),
            "erode" => Ok(Self::Erode),
            "shift" => Ok(Self::Shift),
            "hole" => Ok(Self::Hole),
            "none" => Ok(Self::None),
            other => Err(CrispError::Config(format!("unknown corruption mode {other:?}"))),
        }
    }
}

/// One mode is drawn uniformly from `modes` using `seed`, then applied with
/// `ceil(severity)` as its integer strength.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    pub severity: f64,
    pub modes: Vec<CorruptionMode>,
    pub seed: u64,
}

pub fn corrupt_mask(mask: &Mask, config: &CorruptionConfig) -> Mask {
    let strength = config.severity.max(0.0).ceil() as usize;
    if strength == 0 || config.modes.is_empty() {
        return mask.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mode = *config.modes.choose(&mut rng).expect("non-empty");
    match mode {
        CorruptionMode::None => mask.clone(),
        CorruptionMode::Dilate => (0..strength).fold(mask.clone(), |m, _| dilate_labels(&m)),
        CorruptionMode::Erode => {
            let (h, w) = (mask.height(), mask.width());
            let kept = morphology::erode_n(&mask.foreground(), h, w, strength);
            let mut out = mask.clone();
            for (l, keep) in out.labels_mut().iter_mut().zip(kept) {
                if !keep {
                    *l = 0;
                }
            }
            out
        }
        CorruptionMode::Shift => {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let dy = (strength as f64 * angle.sin()).round() as i64;
            let dx = (strength as f64 * angle.cos()).round() as i64;
            shift_labels(mask, dy, dx)
        }
        CorruptionMode::Hole => {
            let mut out = mask.clone();
            for _ in 0..strength {
                let fg: Vec<usize> = (0..out.num_pixels()).filter(|&p| out.labels()[p] != 0).collect();
                let Some(&centre) = fg.choose(&mut rng) else { break };
                punch_disc(&mut out, centre, 2.0);
            }
            out
        }
    }
}

/// One 3×3 dilation step of the foreground. A newly covered pixel takes
/// the largest class label among its neighbours, so outer classes grow
/// outward.
fn dilate_labels(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let src = mask.labels();
    let mut out = mask.clone();
    let dst = out.labels_mut();
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] != 0 {
                continue;
            }
            let mut best = 0u8;
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    best = best.max(src[ny * w + nx]);
                }
            }
            dst[y * w + x] = best;
        }
    }
    out
}

fn shift_labels(mask: &Mask, dy: i64, dx: i64) -> Mask {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut out = Mask::background(mask.height(), mask.width(), mask.num_classes());
    let dst = out.labels_mut();
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels()[(y * w + x) as usize];
            let (ny, nx) = (y + dy, x + dx);
            if l != 0 && (0..h).contains(&ny) && (0..w).contains(&nx) {
                dst[(ny * w + nx) as usize] = l;
            }
        }
    }
    out
}

fn punch_disc(mask: &mut Mask, centre: usize, radius: f64) {
    let w = mask.width();
    let (cy, cx) = ((centre / w) as f64, (centre % w) as f64);
    let h = mask.height();
    let labels = mask.labels_mut();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= radius * radius {
                labels[y * w + x] = 0;
            }
        }
    }
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC)
        .u32(d.samples.len() as u32)
        .u32(d.height as u32)
        .u32(d.width as u32)
        .u32(d.num_classes as u32)
        .u64(d.seed);
    for s in &d.samples {
        w.f64s(&s.image);
        w.bytes(s.mask.labels());
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let seed = r.u64()?;
    if count == 0 || height == 0 || width == 0 || !(2..=255).contains(&num_classes) {
        return Err(CrispError::Format(format!(
            "invalid header: {count} samples of {num_classes}x{height}x{width}"
        )));
    }
    let hw = height * width;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = r.f64s(hw)?;
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CrispError::Format(format!("sample {i} has pixels outside [0,1]")));
        }
        let labels = r.take(hw)?.to_vec();
        let mask = Mask::new(height, width, num_classes, labels)
            .map_err(|e| CrispError::Format(format!("sample {i}: {e}")))?;
        samples.push(Sample { image, mask });
    }
    r.finish()?;
    Ok(Dataset {
        samples,
        height,
        width,
        num_classes,
        seed,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
