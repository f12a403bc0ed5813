//! Wavelet-enhanced cross-modal attention: frequency reweighting of patch
//! features, text-query cross-attention and anomaly-map synthesis.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{ParamVars, SparseMap, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{gap, pointwise_conv, Linear};
use crate::tensor::{NamedParamSet, Tensor};

/// Guard for normalizing zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Registers the shared `wcma.*` parameters.
pub fn init_params(params: &mut NamedParamSet, dim: usize, rng: &mut impl Rng) -> Result<()> {
    let bound = 1.0 / (dim as f64).sqrt();
    Linear::new("wcma.w1").init(params, dim, dim, rng)?;
    Linear::new("wcma.w2").init(params, dim, dim, rng)?;
    params.insert("wcma.pconv.weight", Tensor::uniform([dim, dim], bound, rng))?;
    params.insert("wcma.pconv.bias", Tensor::zeros([dim]))?;
    for name in ["wcma.w_q", "wcma.w_k", "wcma.w_v"] {
        params.insert(name, Tensor::uniform([dim, dim], bound, rng))?;
    }
    Ok(())
}

/// `F_p = F_H ⊙ σ(W_1·ReLU(GAP(F_L+F_H)) + W_2·ReLU(δ_p(F_L+F_H))) + F_L`.
///
/// The pooled channel term is broadcast over every pixel of the local term.
pub fn frequency_attention<'t>(p: &ParamVars<'t>, low: Var<'t>, high: Var<'t>) -> Result<Var<'t>> {
    let shape = low.shape();
    if shape.len() != 3 || high.shape() != shape {
        return Err(Error::dim("frequency_attention", &shape, &high.shape()));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mixed = low.add(high)?;
    let global = Linear::new("wcma.w1").forward(p, gap(mixed)?.relu())?;
    let conv = pointwise_conv(mixed, p.get("wcma.pconv.weight")?, p.get("wcma.pconv.bias")?)?
        .relu()
        .reshape([h * w, c])?;
    let local = Linear::new("wcma.w2").forward(p, conv)?;
    let gate = local.add_row(global)?.sigmoid().reshape([h, w, c])?;
    high.mul(gate)?.add(low)
}

#[derive(Clone, Copy, Debug)]
pub struct Attention<'t> {
    /// Refined text embeddings `F_T'`, `2×C`.
    pub refined: Var<'t>,
    /// Attention weights, `2×(H·W)`.
    pub weights: Var<'t>,
}

/// `F_T' = softmax(Q Kᵀ / √C) V` with text queries and patch keys/values.
pub fn cross_attend<'t>(p: &ParamVars<'t>, text: Var<'t>, patches: Var<'t>) -> Result<Attention<'t>> {
    let (ts, ps) = (text.shape(), patches.shape());
    if ts.len() != 2 || ps.len() != 3 || ts[1] != ps[2] {
        return Err(Error::dim("cross_attend", &ts, &ps));
    }
    let c = ts[1];
    let flat = patches.reshape([ps[0] * ps[1], c])?;
    let q = text.matmul(p.get("wcma.w_q")?)?;
    let k = flat.matmul(p.get("wcma.w_k")?)?;
    let v = flat.matmul(p.get("wcma.w_v")?)?;
    let logits = q.matmul(k.transpose()?)?.scale(1.0 / (c as f64).sqrt());
    let weights = logits.softmax(1)?;
    Ok(Attention {
        refined: weights.matmul(v)?,
        weights,
    })
}

/// Per-patch probability of the abnormal row: cosine similarities of each
/// normalized patch against both normalized text rows, softmaxed at `tau`.
pub fn anomaly_map<'t>(text: Var<'t>, patches: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let (ts, ps) = (text.shape(), patches.shape());
    if ts != [2, *ps.last().unwrap_or(&0)] || ps.len() != 3 {
        return Err(Error::dim("anomaly_map", &ts, &ps));
    }
    let (h, w, c) = (ps[0], ps[1], ps[2]);
    let patch_dirs = patches.reshape([h * w, c])?.normalize_rows(NORM_EPS);
    let text_dirs = text.normalize_rows(NORM_EPS);
    let sims = patch_dirs.matmul(text_dirs.transpose()?)?.scale(1.0 / tau);
    let probs = sims.softmax(1)?;
    let abnormal: Vec<usize> = (0..h * w).map(|i| 2 * i + 1).collect();
    probs.gather(&abnormal)?.reshape([h, w])
}

/// Align-corners bilinear resampling from `src` to `dst` as a sparse map.
pub fn bilinear_map(src: (usize, usize), dst: (usize, usize)) -> SparseMap {
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        (0..n_dst)
            .map(|o| {
                let pos = if n_dst > 1 {
                    o as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
                } else {
                    0.0
                };
                let i0 = (pos.floor() as usize).min(n_src - 1);
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(src.0, dst.0), axis(src.1, dst.1));
    let mut rows = Vec::with_capacity(dst.0 * dst.1);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut row = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        row.push((yy * src.1 + xx, wgt));
                    }
                }
            }
            rows.push(row);
        }
    }
    SparseMap {
        in_len: src.0 * src.1,
        out_shape: vec![dst.0, dst.1],
        rows,
    }
}

/// Plain bilinear upsampling of an `H×W` map.
pub fn upsample(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim("upsample", s, &[2]));
    }
    let sm = bilinear_map((s[0], s[1]), target);
    let data = sm
        .rows
        .iter()
        .map(|row| row.iter().map(|&(i, w)| w * map.data()[i]).sum())
        .collect();
    Tensor::new([target.0, target.1], data)
}

/// Upsamples every per-layer map to `target` and averages them.
pub fn fuse_maps<'t>(maps: &[Var<'t>], target: (usize, usize)) -> Result<Var<'t>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("fuse_maps needs at least one map".into()))?;
    let s = first.shape();
    if s.len() != 2 {
        return Err(Error::dim("fuse_maps", &s, &[2]));
    }
    let sm = Rc::new(bilinear_map((s[0], s[1]), target));
    let mut total: Option<Var<'t>> = None;
    for m in maps {
        let up = m.sparse(Rc::clone(&sm))?;
        total = Some(match total {
            Some(t) => t.add(up)?,
            None => up,
        });
    }
    Ok(total.unwrap().scale(1.0 / maps.len() as f64))
}

/// Convenience for callers holding plain tensors.
pub fn fuse_tensors(maps: &[Tensor], target: (usize, usize)) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|m| tape.constant(m)).collect();
    Ok(fuse_maps(&vars, target)?.value())
}
