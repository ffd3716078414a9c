//! Synthetic grayscale tasks: a texture pair separable from local
//! statistics alone, a shape pair separable only from the global
//! arrangement of identical local elements, and a four-class source task
//! blending both, used to pretrain backbones at desk scale.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Dataset;

/// Which pattern family to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Two classes of full-field gratings differing only in spatial
    /// frequency; orientation and phase are random in both.
    Texture,
    /// Two classes of six identical bright elements, arranged on a wide or
    /// a tight hexagon; local patches look the same in both.
    Shape,
    /// Four classes crossing frequency band with arrangement, for
    /// pretraining backbones that carry both kinds of feature.
    Source,
}

/// Recipe for one synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Image side in pixels; images are square and single-channel.
    pub size: usize,
    pub per_class: usize,
    /// Pixel noise sigma on the [0,1] intensity scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::Texture,
            size: 32,
            per_class: 100,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn classes(&self) -> usize {
        match self.kind {
            TaskKind::Texture | TaskKind::Shape => 2,
            TaskKind::Source => 4,
        }
    }

    /// Smallest side that still renders the pattern: a few grating periods
    /// for texture, the wide hexagon plus element margins for shapes.
    pub fn validate(&self) -> Result<()> {
        let min = match self.kind {
            TaskKind::Texture => 16,
            TaskKind::Shape | TaskKind::Source => 28,
        };
        if self.size < min {
            return Err(Error::Config(format!(
                "size {} is too small to render {:?} patterns (need at least {min})",
                self.size, self.kind
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) || !self.noise.is_finite() {
            return Err(Error::Config(format!(
                "noise {} outside [0, 0.5]",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Cycles per pixel for the two frequency bands. High-band periods stay
/// above two pixels so the grating survives quantization.
const LOW_BAND: (f64, f64) = (0.06, 0.10);
const HIGH_BAND: (f64, f64) = (0.20, 0.28);
/// Elements per arrangement and their square side in pixels.
const ELEMENTS: usize = 6;
const ELEMENT_SIDE: usize = 3;
/// Hexagon radii as fractions of the image side. The tight radius keeps
/// neighbor distances just past a small conv stack's receptive field, so
/// only wider receptive fields see more than one element at a time.
const WIDE_R: f64 = 0.40;
const TIGHT_R: f64 = 0.30;
/// Background intensity. Near mid-gray it normalizes to roughly zero, the
/// same value conv padding injects, so image borders carry no class signal.
const BACKGROUND: f64 = 0.5;

fn grating(size: usize, freq: f64, theta: f64, phase: f64, amp: f64) -> Array2<f64> {
    let (s, c) = theta.sin_cos();
    Array2::from_shape_fn((size, size), |(i, j)| {
        let u = j as f64 * c + i as f64 * s;
        0.5 + amp * (2.0 * PI * freq * u + phase).sin()
    })
}

fn stamp(img: &mut Array2<f64>, cy: f64, cx: f64, value: f64) {
    let half = (ELEMENT_SIDE / 2) as i64;
    let (cy, cx) = (cy.round() as i64, cx.round() as i64);
    let n = img.nrows() as i64;
    for dy in -half..=half {
        for dx in -half..=half {
            let (y, x) = (cy + dy, cx + dx);
            if (0..n).contains(&y) && (0..n).contains(&x) {
                img[(y as usize, x as usize)] = value;
            }
        }
    }
}

fn hexagon(img: &mut Array2<f64>, radius: f64, rot: f64, jitter: (f64, f64)) {
    let center = (img.nrows() as f64 - 1.0) / 2.0;
    for k in 0..ELEMENTS {
        let a = rot + 2.0 * PI * k as f64 / ELEMENTS as f64;
        stamp(
            img,
            center + jitter.0 + radius * a.sin(),
            center + jitter.1 + radius * a.cos(),
            1.0,
        );
    }
}

fn arrangement(size: usize, tight: bool, rng: &mut ChaCha8Rng, base: Array2<f64>) -> Array2<f64> {
    let frac = if tight { TIGHT_R } else { WIDE_R };
    let radius = frac * size as f64 * rng.gen_range(0.97..1.03);
    let rot = rng.gen_range(0.0..2.0 * PI);
    let jitter = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let mut img = base;
    hexagon(&mut img, radius, rot, jitter);
    img
}

fn band_freq(high: bool, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = if high { HIGH_BAND } else { LOW_BAND };
    rng.gen_range(lo..hi)
}

/// One [0,1]-scale image for `label` under `spec`'s kind.
fn render(spec: &SyntheticTaskSpec, label: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    match spec.kind {
        TaskKind::Texture => grating(spec.size, band_freq(label == 1, rng), theta, phase, 0.5),
        TaskKind::Shape => {
            let base = Array2::from_elem((spec.size, spec.size), BACKGROUND);
            arrangement(spec.size, label == 1, rng, base)
        }
        TaskKind::Source => {
            let base = grating(
                spec.size,
                band_freq(label % 2 == 1, rng),
                theta,
                phase,
                0.25,
            );
            arrangement(spec.size, label / 2 == 1, rng, base)
        }
    }
}

fn quantize(img: &Array2<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    img.map(|&v| {
        let n = if noise > 0.0 {
            noise * gauss.sample(rng)
        } else {
            0.0
        };
        ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// All images for `spec`, quantized to 8 bits, interleaved by class so
/// labels cycle 0..classes.
pub fn render_all(spec: &SyntheticTaskSpec) -> Result<(Vec<Array2<u8>>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.classes();
    let mut images = Vec::with_capacity(classes * spec.per_class);
    let mut labels = Vec::with_capacity(classes * spec.per_class);
    for _ in 0..spec.per_class {
        for label in 0..classes {
            let img = render(spec, label, &mut rng);
            images.push(quantize(&img, spec.noise, &mut rng));
            labels.push(label);
        }
    }
    Ok((images, labels))
}

/// In-memory dataset on the same intensity scale `Dataset::from_manifest`
/// produces, so generated and disk-loaded data match exactly.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset<f32>> {
    let (images, labels) = render_all(spec)?;
    let n = images.len();
    let s = spec.size;
    let mut stacked = Array4::<f32>::zeros((n, 1, s, s));
    for (k, img) in images.iter().enumerate() {
        for ((i, j), &v) in img.indexed_iter() {
            stacked[(k, 0, i, j)] = (v as f64 / 255.0 - 0.5) as f32;
        }
    }
    Dataset::new(stacked, labels)
}

/// Write PNGs plus a `path,label` manifest under `dir`; returns the
/// manifest path. Fixed seeds give byte-identical files across runs.
pub fn write_dataset(spec: &SyntheticTaskSpec, dir: &Path) -> Result<PathBuf> {
    let (images, labels) = render_all(spec)?;
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    writer.write_record(["path", "label"])?;
    let width = images.len().to_string().len().max(4);
    for (k, (img, &label)) in images.iter().zip(&labels).enumerate() {
        let name = format!("img{k:0width$}.png");
        let side = spec.size as u32;
        let buf = image::GrayImage::from_raw(side, side, img.iter().copied().collect())
            .ok_or_else(|| {
                Error::Config(format!("could not pack a {side}x{side} grayscale buffer"))
            })?;
        buf.save(dir.join(&name))?;
        writer.write_record([name.as_str(), &label.to_string()])?;
    }
    writer.flush()?;
    Ok(manifest)
}
