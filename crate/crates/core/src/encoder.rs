//! Frozen stand-ins for the pretrained image and text encoders, plus the
//! binary feature-dump format for features computed elsewhere.
//!
//! All weights are drawn once from the spec seed (uniform in `±1/√C`) and are
//! never registered as trainable parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_STREAM: u64 = 0x696d_6167;
const TEXT_STREAM: u64 = 0x7465_7874;
const MAX_TOKENS: usize = 64;

/// Words available to prompt templates.
pub const VOCABULARY: [&str; 5] = ["a", "photo", "of", "good", "damaged"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub seed: u64,
    /// Embedding width `C`.
    pub dim: usize,
    /// Patch grid `(H, W)`.
    pub grid: (usize, usize),
    pub taps: usize,
    pub image_size: (usize, usize),
    pub channels: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            grid: (8, 8),
            taps: 4,
            image_size: (64, 64),
            channels: 1,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (gh, gw) = self.grid;
        if self.dim < 8 {
            return Err(Error::Config(format!("embedding dim {} < 8", self.dim)));
        }
        if gh == 0 || gw == 0 || h == 0 || w == 0 || h % gh != 0 || w % gw != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible into a {gh}x{gw} grid"
            )));
        }
        if self.taps == 0 || self.channels == 0 {
            return Err(Error::Config("taps and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.image_size.0 / self.grid.0, self.image_size.1 / self.grid.1)
    }

    fn bound(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Stub,
    File,
}

/// Encoder output: class token and per-layer patch grids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub class_token: Tensor,
    /// `(layer_id, H×W×C grid)`, ids strictly increasing.
    pub layers: Vec<(u32, Tensor)>,
    pub source: FeatureSource,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.class_token.numel()
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.layers[0].1.shape();
        (s[0], s[1])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_token.numel();
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Input("feature bundle without layers".into()))?;
        let shape = first.1.shape().to_vec();
        if shape.len() != 3 || shape[2] != c {
            return Err(Error::dim("feature bundle", &shape, &[c]));
        }
        for pair in self.layers.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Input(format!(
                    "layer ids not increasing: {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        if let Some((_, t)) = self.layers.iter().find(|(_, t)| t.shape() != shape) {
            return Err(Error::dim("feature bundle", &shape, t.shape()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(n: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Seeded patch-embedding stack: patchify, linear embed, then `taps` blocks
/// of 3×3 replicate-padded mean mixing, channel map and `tanh`. Pixels are
/// rescaled from `[0, 1]` to `[-1, 1]` before the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    spec: EncoderSpec,
    embed: Vec<f64>,
    blocks: Vec<Vec<f64>>,
    class_proj: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, IMAGE_STREAM);
        let (ph, pw) = spec.patch_size();
        let c = spec.dim;
        let b = spec.bound();
        let embed = uniform(c * ph * pw * spec.channels, b, &mut rng);
        let blocks = (0..spec.taps).map(|_| uniform(c * c, b, &mut rng)).collect();
        let class_proj = uniform(c * c, b, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            embed,
            blocks,
            class_proj,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// All frozen weights, concatenated; used to verify they never change.
    pub fn weights(&self) -> Vec<f64> {
        let mut all = self.embed.clone();
        self.blocks.iter().for_each(|b| all.extend_from_slice(b));
        all.extend_from_slice(&self.class_proj);
        all
    }

    /// Encodes an `h×w×ch` image with values in `[0, 1]`.
    pub fn encode(&self, pixels: &Tensor) -> Result<FeatureBundle> {
        let s = &self.spec;
        let (h, w) = s.image_size;
        let want = [h, w, s.channels];
        let shape = pixels.shape();
        let matches = shape == want || (s.channels == 1 && shape == [h, w]);
        if !matches {
            return Err(Error::Input(format!(
                "image shape {shape:?}, encoder expects {want:?}"
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values outside [0, 1]".into()));
        }
        let (gh, gw) = s.grid;
        let (ph, pw) = s.patch_size();
        let ch = s.channels;
        let c = s.dim;
        let plen = ph * pw * ch;
        let px = pixels.data();

        let mut patches = vec![0.0; gh * gw * plen];
        for gi in 0..gh {
            for gj in 0..gw {
                let dst = &mut patches[(gi * gw + gj) * plen..(gi * gw + gj + 1) * plen];
                let mut k = 0;
                for y in 0..ph {
                    for x in 0..pw {
                        let base = ((gi * ph + y) * w + gj * pw + x) * ch;
                        for (d, v) in dst[k..k + ch].iter_mut().zip(&px[base..base + ch]) {
                            *d = 2.0 * v - 1.0;
                        }
                        k += ch;
                    }
                }
            }
        }
        let cells = gh * gw;
        let mut grid = vec![0.0; cells * c];
        gemm(
            cells,
            plen,
            c,
            &patches,
            false,
            &self.embed,
            true,
            &mut grid,
            false,
        );

        let mut layers = Vec::with_capacity(s.taps);
        for (i, weight) in self.blocks.iter().enumerate() {
            let mixed = mean_mix(&grid, gh, gw, c);
            let mut next = vec![0.0; cells * c];
            gemm(cells, c, c, &mixed, false, weight, true, &mut next, false);
            next.iter_mut().for_each(|v| *v = v.tanh());
            grid = next;
            layers.push((i as u32 + 1, Tensor::new([gh, gw, c], grid.clone())?));
        }
        let mut pooled = vec![0.0; c];
        for cell in grid.chunks(c) {
            pooled.iter_mut().zip(cell).for_each(|(a, b)| *a += b);
        }
        pooled.iter_mut().for_each(|v| *v /= cells as f64);
        let mut class_token = vec![0.0; c];
        gemm(
            1,
            c,
            c,
            &pooled,
            false,
            &self.class_proj,
            true,
            &mut class_token,
            false,
        );

        Ok(FeatureBundle {
            class_token: Tensor::vector(class_token),
            layers,
            source: FeatureSource::Stub,
        })
    }
}

/// 3×3 box mean with replicate padding.
fn mean_mix(grid: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * c;
            for di in [-1isize, 0, 1] {
                let y = (i as isize + di).clamp(0, h as isize - 1) as usize;
                for dj in [-1isize, 0, 1] {
                    let x = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                    let src = (y * w + x) * c;
                    for k in 0..c {
                        out[dst + k] += grid[src + k];
                    }
                }
            }
            out[dst..dst + c].iter_mut().for_each(|v| *v /= 9.0);
        }
    }
    out
}

/// A token matrix and the positions that hold learnable prompt slots.
#[derive(Clone, Debug)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    pub slot_mask: Vec<bool>,
}

impl TokenSequence<'_> {
    pub fn len(&self) -> usize {
        self.slot_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_mask.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.slot_mask.iter().filter(|&&s| s).count()
    }
}

/// Seeded text encoder: position-weighted token mean, two frozen affine maps
/// with `tanh` between them, and L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    words: BTreeMap<&'static str, Vec<f64>>,
    positions: Vec<f64>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TextEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.dim;
        let b = spec.bound();
        let mut rng = rng_for(spec.seed, TEXT_STREAM);
        let words = VOCABULARY.iter().map(|&w| (w, uniform(c, b, &mut rng))).collect();
        let positions = (0..MAX_TOKENS).map(|_| rng.random_range(0.5..1.5)).collect();
        // Stored transposed so the forward pass is a plain row-vector product.
        let w1 = Tensor::new([c, c], uniform(c * c, b, &mut rng))?;
        let b1 = Tensor::vector(uniform(c, b, &mut rng));
        let w2 = Tensor::new([c, c], uniform(c * c, b, &mut rng))?;
        let b2 = Tensor::vector(uniform(c, b, &mut rng));
        Ok(Self {
            dim: c,
            words,
            positions,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word(&self, word: &str) -> Result<&[f64]> {
        self.words
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("word {word:?} not in the template vocabulary")))
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.words.values().flatten().copied().collect();
        all.extend_from_slice(&self.positions);
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            all.extend_from_slice(t.data());
        }
        all
    }

    /// Encodes a token sequence to a unit vector; differentiable in the tokens.
    pub fn encode<'t>(&self, seq: &TokenSequence<'t>) -> Result<Var<'t>> {
        let shape = seq.tokens.shape();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != seq.slot_mask.len() {
            return Err(Error::Input(format!(
                "token matrix {shape:?} does not match dim {} with {} positions",
                self.dim,
                seq.slot_mask.len()
            )));
        }
        let n = shape[0];
        if n > MAX_TOKENS {
            return Err(Error::Input(format!("{n} tokens exceeds {MAX_TOKENS}")));
        }
        let tape = seq.tokens.tape();
        let total: f64 = self.positions[..n].iter().sum();
        let weights = self.positions[..n].iter().map(|p| p / total).collect();
        let pooled = tape.constant_raw([1, n], weights)?.matmul(seq.tokens)?;
        let h = pooled
            .matmul(tape.constant(&self.w1))?
            .add_row(tape.constant(&self.b1))?
            .tanh();
        let out = h
            .matmul(tape.constant(&self.w2))?
            .add_row(tape.constant(&self.b2))?
            .normalize_rows(1e-12);
        out.reshape([self.dim])
    }

    /// Frozen token vectors for a list of template words.
    pub fn template<'t>(&self, tape: &'t Tape, words: &[&str]) -> Result<Vec<Var<'t>>> {
        words
            .iter()
            .map(|w| tape.constant_raw([self.dim], self.word(w)?.to_vec()))
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"WMOEFEAT";
const VERSION: u32 = 1;

/// Writes a bundle in the little-endian feature-dump format (float32 payload).
pub fn save_features(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(bundle)?)?;
    Ok(())
}

pub fn encode_features(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let c = bundle.dim();
    let (h, w) = bundle.grid();
    let mut out = Vec::with_capacity(28 + 4 * c * (1 + bundle.layers.len() * (h * w + 1)));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, c as u32, h as u32, w as u32, bundle.layers.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let push = |out: &mut Vec<u8>, data: &[f64]| {
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    push(&mut out, bundle.class_token.data());
    for (id, grid) in &bundle.layers {
        out.extend_from_slice(&id.to_le_bytes());
        push(&mut out, grid.data());
    }
    Ok(out)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    decode_features(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let b = self.take(n * 4, what)?;
        b.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(Error::format(
                        (start + 4 * i) as u64,
                        format!("non-finite value in {what}"),
                    ))
                }
            })
            .collect()
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let dims_at = r.pos as u64;
    let c = r.u32("C")? as usize;
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    let l = r.u32("L")? as usize;
    if c == 0 || h == 0 || w == 0 || l == 0 {
        return Err(Error::format(
            dims_at,
            format!("zero extent in C={c} H={h} W={w} L={l}"),
        ));
    }
    let per_layer = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(dims_at, format!("extent C={c} H={h} W={w} overflows")))?;
    let class_token = Tensor::vector(r.f32s(c, "class token")?);
    let mut layers = Vec::new();
    for i in 0..l {
        let at = r.pos as u64;
        let id = r.u32("layer id")?;
        if let Some((prev, _)) = layers.last() {
            if id <= *prev {
                return Err(Error::format(
                    at,
                    format!("layer id {id} after {prev}: ids must increase"),
                ));
            }
        }
        let grid = r.f32s(per_layer, &format!("layer {i}"))?;
        layers.push((id, Tensor::new([h, w, c], grid)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(FeatureBundle {
        class_token,
        layers,
        source: FeatureSource::File,
    })
}
