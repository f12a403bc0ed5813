//! Semantic-aware mixture of experts: adapter pooling over tapped layers,
//! top-k routing, class-token enrichment and image-level scoring.

use rand::Rng;

use crate::autodiff::{ParamVars, Var};
use crate::error::{Error, Result};
use crate::ops::{gap, Linear, Mlp};
use crate::tensor::NamedParamSet;
use crate::wcma::NORM_EPS;

pub fn adapter_path(layer: usize) -> String {
    format!("samoe.adapter.{layer}")
}

pub fn expert_path(n: usize) -> String {
    format!("samoe.expert.{n}")
}

pub const GATE: &str = "samoe.gate";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeShape {
    pub dim: usize,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl MoeShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || !self.dim.is_multiple_of(self.layers) {
            return Err(Error::Config(format!(
                "channel count {} is not divisible by layer count {}",
                self.dim, self.layers
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top-k {} must lie in 1..={}",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }
}

pub fn init_params(params: &mut NamedParamSet, shape: MoeShape, rng: &mut impl Rng) -> Result<()> {
    shape.validate()?;
    let c = shape.dim;
    for l in 0..shape.layers {
        Linear::new(&adapter_path(l)).init(params, c, c / shape.layers, rng)?;
    }
    Linear::new(GATE).init(params, c, shape.experts, rng)?;
    for n in 0..shape.experts {
        Mlp::new(&expert_path(n)).init(params, c, c, c, rng)?;
    }
    Ok(())
}

/// Projects each layer to `C/L` channels, concatenates and pools to `x_a`.
///
/// The adapters are affine, so pooling before projecting gives the same
/// vector as projecting every patch first and is `H·W` times cheaper.
pub fn adapter_pool<'t>(p: &ParamVars<'t>, layers: &[Var<'t>]) -> Result<Var<'t>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Contract("adapter_pool needs at least one layer".into()))?;
    let c = first.shape()[first.shape().len() - 1];
    if c % layers.len() != 0 {
        return Err(Error::Config(format!(
            "channel count {c} is not divisible by layer count {}",
            layers.len()
        )));
    }
    let parts = layers
        .iter()
        .enumerate()
        .map(|(l, grid)| Linear::new(&adapter_path(l)).forward(p, gap(*grid)?))
        .collect::<Result<Vec<_>>>()?;
    first.tape().concat(&parts)
}

#[derive(Clone, Debug)]
pub struct RouterOutput<'t> {
    /// Gate scores `s_n`, length `N`.
    pub scores: Var<'t>,
    /// Indices of the `k` largest scores, best first; ties go to the lower index.
    pub selected: Vec<usize>,
    /// Softmax over the selected scores, aligned with `selected`.
    pub weights: Var<'t>,
}

pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

pub fn route<'t>(p: &ParamVars<'t>, x_a: Var<'t>, k: usize) -> Result<RouterOutput<'t>> {
    let scores = Linear::new(GATE).forward(p, x_a)?;
    let n = scores.shape()[0];
    if k == 0 || k > n {
        return Err(Error::Contract(format!("top-k {k} must lie in 1..={n}")));
    }
    let selected = top_k(&scores.to_vec(), k);
    let weights = scores.gather(&selected)?.softmax(0)?;
    Ok(RouterOutput {
        scores,
        selected,
        weights,
    })
}

/// `x_p = Σ_k w_k E_k(x_a)`; only selected experts are evaluated.
pub fn moe_aggregate<'t>(p: &ParamVars<'t>, routing: &RouterOutput<'t>, x_a: Var<'t>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (i, &e) in routing.selected.iter().enumerate() {
        let out = Mlp::new(&expert_path(e))
            .forward(p, x_a)?
            .scale_by(routing.weights.element(i)?)?;
        acc = Some(match acc {
            Some(a) => a.add(out)?,
            None => out,
        });
    }
    acc.ok_or_else(|| Error::Contract("routing selected no experts".into()))
}

/// `N·Σ_n π_n²` over the full gate softmax; equals 1 for a uniform gate.
pub fn balance_penalty<'t>(routing: &RouterOutput<'t>) -> Result<Var<'t>> {
    let n = routing.scores.shape()[0];
    Ok(routing.scores.softmax(0)?.square().sum().scale(n as f64))
}

/// Abnormal probability of `x_cls = x_p + x_c` against the two text rows.
pub fn image_score<'t>(x_p: Option<Var<'t>>, x_c: Var<'t>, text: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let x_cls = match x_p {
        Some(x) => x.add(x_c)?,
        None => x_c,
    };
    let c = x_cls.shape()[0];
    if text.shape() != [2, c] {
        return Err(Error::dim("image_score", &text.shape(), &[2, c]));
    }
    let dir = x_cls.reshape([1, c])?.normalize_rows(NORM_EPS);
    let sims = dir
        .matmul(text.normalize_rows(NORM_EPS).transpose()?)?
        .reshape([2])?
        .scale(1.0 / tau);
    sims.softmax(0)?.element(1)
}

/// `ŝ = s_txt + max(M)` for ranking, and `ŝ/2` as a probability.
pub fn final_score<'t>(s_txt: Var<'t>, fused: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let raw = s_txt.add(fused.max())?;
    Ok((raw, raw.scale(0.5)))
}
