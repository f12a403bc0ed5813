//! Synthetic textured-defect datasets and the zero-shot family split.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;
use crate::train::csv_err;

/// Defect area bounds as fractions of the image.
pub const MIN_AREA: f64 = 0.002;
pub const MAX_AREA: f64 = 0.10;
/// Amplitude of the uniform noise added to every image.
pub const NOISE: f64 = 0.02;
const MAX_DEFECT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Sinusoidal grating.
    Grating {
        period: f64,
        angle: f64,
    },
    Checker {
        period: f64,
    },
    /// White noise box-filtered `radius` pixels each way, twice.
    Noise {
        radius: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    Blob,
    Scratch,
    PatchSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub texture: Texture,
    pub defects: Vec<Defect>,
    /// Defect contrast range.
    pub intensity: (f64, f64),
    pub anomaly_rate: f64,
    /// Relative jitter applied to texture parameters per sample.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.2
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(format!("family {:?}: {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad("name must be non-empty ASCII letters, digits, '_' or '-'".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly rate {} outside [0,1]", self.anomaly_rate));
        }
        if self.anomaly_rate > 0.0 && self.defects.is_empty() {
            return bad("anomalous samples need a non-empty defect menu".into());
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "intensity range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            ));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0,1)", self.jitter));
        }
        match self.texture {
            Texture::Grating { period, angle } if period >= 2.0 && angle.is_finite() => Ok(()),
            Texture::Checker { period } if period >= 2.0 => Ok(()),
            Texture::Noise { radius } if radius <= 8 => Ok(()),
            t => bad(format!("texture parameters {t:?} out of range")),
        }
    }
}

/// A generator input file: image size plus the families to draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub families: Vec<FamilySpec>,
}

fn default_size() -> usize {
    64
}

impl DatasetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Spec(format!("dataset spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.image_size)?;
        let mut seen = BTreeSet::new();
        for f in &self.families {
            f.validate()?;
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Spec(format!("duplicate family {:?}", f.name)));
            }
        }
        Ok(())
    }

    /// `n` samples per family, concatenated in family order.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<ImageSample>> {
        self.validate()?;
        let mut out = Vec::new();
        for (i, f) in self.families.iter().enumerate() {
            out.extend(generate(f, self.image_size, n, mix(seed, i as u64))?);
        }
        Ok(out)
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return Err(Error::Spec(format!(
            "image size {size} cannot host a defect within the area bounds"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub family: String,
    pub label: u8,
    /// `h×w`, values in `[0,1]`.
    pub pixels: Tensor,
    /// `h×w`, values in `{0,1}`.
    pub mask: Tensor,
    /// Per-sample seed; zero for samples read back from disk.
    pub seed: u64,
}

impl ImageSample {
    pub fn check(&self) -> Result<()> {
        let positives = self.mask.data().iter().filter(|&&v| v > 0.5).count();
        if (self.label == 1) != (positives > 0) {
            return Err(Error::Input(format!(
                "sample {}: label {} with {positives} mask pixels",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

/// SplitMix64 step, used to derive independent per-sample seeds.
fn mix(seed: u64, i: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate(spec: &FamilySpec, size: usize, n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    check_size(size)?;
    if n == 0 {
        return Err(Error::Spec("sample count must be at least 1".into()));
    }
    let anomalous = (spec.anomaly_rate * n as f64).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < anomalous)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let s = mix(seed, i as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut pixels = texture(&jittered(spec.texture, spec.jitter, &mut rng), size, &mut rng);
            let mut mask = vec![0.0; size * size];
            if label == 1 {
                let kind = *spec.defects.choose(&mut rng).expect("validated non-empty");
                let amp = rng.random_range(spec.intensity.0..=spec.intensity.1);
                apply_defect(kind, spec.texture, amp, size, &mut pixels, &mut mask, &mut rng)?;
            }
            for p in &mut pixels {
                *p = (*p + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0);
            }
            Ok(ImageSample {
                id: format!("{}_{i:05}", spec.name),
                family: spec.name.clone(),
                label,
                pixels: Tensor::new([size, size], pixels)?,
                mask: Tensor::new([size, size], mask)?,
                seed: s,
            })
        })
        .collect()
}

fn jittered(t: Texture, j: f64, rng: &mut impl Rng) -> Texture {
    let mut scale = || 1.0 + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
    match t {
        Texture::Grating { period, angle } => {
            let p = period * scale();
            let a = angle + (scale() - 1.0) * PI;
            Texture::Grating { period: p, angle: a }
        }
        Texture::Checker { period } => Texture::Checker {
            period: period * scale(),
        },
        Texture::Noise { radius } => Texture::Noise { radius },
    }
}

fn texture(t: &Texture, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    match *t {
        Texture::Grating { period, angle } => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * c + y as f64 * s) / period;
                    out[y * size + x] = 0.5 + 0.3 * (2.0 * PI * u + phase).sin();
                }
            }
        }
        Texture::Checker { period } => {
            let (ox, oy) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
            for y in 0..size {
                for x in 0..size {
                    let cx = ((x as f64 + ox) / period).floor() as i64;
                    let cy = ((y as f64 + oy) / period).floor() as i64;
                    out[y * size + x] = if (cx + cy).rem_euclid(2) == 0 { 0.3 } else { 0.7 };
                }
            }
        }
        Texture::Noise { radius } => {
            let mut field: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>()).collect();
            for _ in 0..2 {
                field = box_blur(&field, size, radius);
            }
            let mean = field.iter().sum::<f64>() / field.len() as f64;
            let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
            let sd = var.sqrt().max(1e-12);
            for (o, v) in out.iter_mut().zip(&field) {
                *o = (0.5 + 0.15 * (v - mean) / sd).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn box_blur(src: &[f64], size: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for a in 0..size {
            for b in 0..size {
                let (lo, hi) = (b.saturating_sub(r), (b + r).min(size - 1));
                let at = |k: usize| {
                    if horizontal {
                        src[a * size + k]
                    } else {
                        src[k * size + a]
                    }
                };
                let v = (lo..=hi).map(at).sum::<f64>() / (hi - lo + 1) as f64;
                if horizontal {
                    out[a * size + b] = v;
                } else {
                    out[b * size + a] = v;
                }
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn area_ok(mask: &[f64]) -> bool {
    let frac = mask.iter().filter(|&&v| v > 0.0).count() as f64 / mask.len() as f64;
    (MIN_AREA..=MAX_AREA).contains(&frac)
}

fn apply_defect(
    kind: Defect,
    own: Texture,
    amp: f64,
    size: usize,
    pixels: &mut [f64],
    mask: &mut [f64],
    rng: &mut impl Rng,
) -> Result<()> {
    let n = (size * size) as f64;
    for _ in 0..MAX_DEFECT_TRIES {
        let mut m = vec![0.0; size * size];
        let mut delta = vec![0.0; size * size];
        match kind {
            Defect::Blob => {
                // Support is r ≤ 2σ, so area ≈ 4πσ².
                let target = rng.random_range(MIN_AREA..MAX_AREA) * n;
                let sigma = (target / (4.0 * PI)).sqrt();
                let (cy, cx) = (
                    rng.random_range(0.0..size as f64),
                    rng.random_range(0.0..size as f64),
                );
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d2 <= 4.0 * sigma * sigma {
                            let i = y * size + x;
                            m[i] = 1.0;
                            delta[i] = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            Defect::Scratch => {
                let width = rng.random_range(1..=3) as f64;
                let len = rng.random_range(size as f64 * 0.25..size as f64 * 0.8);
                let theta = rng.random_range(0.0..PI);
                let (x0, y0) = (
                    rng.random_range(0.0..size as f64),
                    rng.random_range(0.0..size as f64),
                );
                let (x1, y1) = (x0 + len * theta.cos(), y0 + len * theta.sin());
                for y in 0..size {
                    for x in 0..size {
                        let d = segment_distance((x as f64, y as f64), (x0, y0), (x1, y1));
                        let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                        if cover > 0.0 {
                            let i = y * size + x;
                            m[i] = 1.0;
                            delta[i] = amp * cover;
                        }
                    }
                }
            }
            Defect::PatchSwap => {
                let target = rng.random_range(MIN_AREA..MAX_AREA) * n;
                let aspect = rng.random_range(0.5..2.0f64);
                let h = ((target * aspect).sqrt().round() as usize).clamp(2, size);
                let w = ((target / h as f64).round() as usize).clamp(2, size);
                let (top, left) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
                let other = foreign_texture(own, rng);
                let patch = texture(&other, size, rng);
                for y in top..top + h {
                    for x in left..left + w {
                        let i = y * size + x;
                        m[i] = 1.0;
                        // Blend toward the foreign texture by the defect intensity.
                        delta[i] = amp * (patch[i] - pixels[i]) + amp * 0.25;
                    }
                }
            }
        }
        if area_ok(&m) {
            for ((p, d), (dst, src)) in pixels.iter_mut().zip(&delta).zip(mask.iter_mut().zip(&m)) {
                *p = (*p + d).clamp(0.0, 1.0);
                *dst = *src;
            }
            return Ok(());
        }
    }
    Err(Error::Spec(format!(
        "could not place a {kind:?} defect within the area bounds on a {size}x{size} image"
    )))
}

fn foreign_texture(own: Texture, rng: &mut impl Rng) -> Texture {
    let period = rng.random_range(4.0..12.0);
    let choices = match own {
        Texture::Grating { .. } => [Texture::Checker { period }, Texture::Noise { radius: 1 }],
        Texture::Checker { .. } => [
            Texture::Grating {
                period,
                angle: rng.random_range(0.0..PI),
            },
            Texture::Noise { radius: 1 },
        ],
        Texture::Noise { .. } => [
            Texture::Grating {
                period,
                angle: rng.random_range(0.0..PI),
            },
            Texture::Checker { period },
        ],
    };
    choices[rng.random_range(0..2)]
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Splits by family, refusing any family on both sides.
pub fn zero_shot_split(
    samples: Vec<ImageSample>,
    train: &[&str],
    eval: &[&str],
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let t: BTreeSet<&str> = train.iter().copied().collect();
    let e: BTreeSet<&str> = eval.iter().copied().collect();
    let shared: Vec<String> = t.intersection(&e).map(|s| s.to_string()).collect();
    if !shared.is_empty() {
        return Err(Error::Protocol(shared));
    }
    let (mut tr, mut ev) = (Vec::new(), Vec::new());
    for s in samples {
        if t.contains(s.family.as_str()) {
            tr.push(s);
        } else if e.contains(s.family.as_str()) {
            ev.push(s);
        }
    }
    Ok((tr, ev))
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    family: String,
    label: u8,
    pixels_path: String,
    mask_path: String,
}

pub const INDEX_FILE: &str = "index.csv";

/// Writes `index.csv`, `pixels/<id>.pgm` and, for anomalous rows, `masks/<id>.pgm`.
pub fn write_dataset(samples: &[ImageSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("pixels"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut w = csv::Writer::from_path(dir.join(INDEX_FILE)).map_err(csv_err)?;
    for s in samples {
        s.check()?;
        let pixels_path = format!("pixels/{}.pgm", s.id);
        pgm::write_gray16(dir.join(&pixels_path), &s.pixels)?;
        let mask_path = if s.label == 1 {
            let p = format!("masks/{}.pgm", s.id);
            pgm::write_heatmap(dir.join(&p), &s.mask)?;
            p
        } else {
            String::new()
        };
        w.serialize(IndexRow {
            id: s.id.clone(),
            family: s.family.clone(),
            label: s.label,
            pixels_path,
            mask_path,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory. A directory without an index is an empty set.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::file(dir, "dataset directory does not exist"));
    }
    let index = dir.join(INDEX_FILE);
    if !index.exists() {
        if std::fs::read_dir(dir)?.next().is_none() {
            return Ok(Vec::new());
        }
        return Err(Error::file(&index, "missing index"));
    }
    let mut r = csv::Reader::from_path(&index).map_err(csv_err)?;
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::file(&index, format!("row {}: {e}", line + 2)))?;
        if row.label > 1 {
            return Err(Error::file(
                &index,
                format!("row {}: label {}", line + 2, row.label),
            ));
        }
        let pixels = pgm::read_gray(dir.join(&row.pixels_path))?;
        let mask = match (row.label, row.mask_path.is_empty()) {
            (0, true) => Tensor::zeros(pixels.shape().to_vec()),
            (1, true) => {
                return Err(Error::file(
                    &index,
                    format!("row {}: anomalous sample without mask", line + 2),
                ))
            }
            _ => pgm::read_mask(dir.join(&row.mask_path))?,
        };
        if mask.shape() != pixels.shape() {
            return Err(Error::file(
                dir.join(&row.mask_path),
                format!(
                    "mask {:?} does not match image {:?}",
                    mask.shape(),
                    pixels.shape()
                ),
            ));
        }
        let sample = ImageSample {
            id: row.id,
            family: row.family,
            label: row.label,
            pixels,
            mask,
            seed: 0,
        };
        sample
            .check()
            .map_err(|e| Error::file(dir.join(&row.mask_path), e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

/// The three-family benchmark: two families to train on, a third held out.
pub fn benchmark_spec(image_size: usize) -> DatasetSpec {
    let all = vec![Defect::Blob, Defect::Scratch, Defect::PatchSwap];
    let family = |name: &str, texture| FamilySpec {
        name: name.into(),
        texture,
        defects: all.clone(),
        intensity: (0.15, 0.5),
        anomaly_rate: 0.5,
        jitter: 0.2,
    };
    DatasetSpec {
        image_size,
        families: vec![
            family(
                "A",
                Texture::Grating {
                    period: 8.0,
                    angle: 0.6,
                },
            ),
            family("B", Texture::Checker { period: 8.0 }),
            family("C", Texture::Noise { radius: 2 }),
        ],
    }
}
