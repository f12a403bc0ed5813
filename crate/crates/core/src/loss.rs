//! Training objective: global BCE, per-layer focal and dice, plus the
//! variational KL and reconstruction terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp shared by every log-loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub gamma: f64,
    pub alpha: f64,
    pub smooth: f64,
    pub weights: LossWeights,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            smooth: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ok = self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.alpha)
            && self.smooth > 0.0
            && [w.global, w.focal, w.dice, w.kl, w.rec, w.balance]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss settings {self:?}")))
        }
    }
}

/// Per-term multipliers. All ones except the balance term, which is off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub global: f64,
    pub focal: f64,
    pub dice: f64,
    pub kl: f64,
    pub rec: f64,
    /// Expert load-balancing penalty.
    pub balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            global: 1.0,
            focal: 1.0,
            dice: 1.0,
            kl: 1.0,
            rec: 1.0,
            balance: 0.0,
        }
    }
}

/// Binary cross-entropy of a scalar probability.
pub fn bce<'t>(p: Var<'t>, target: f64) -> Var<'t> {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pos = p.ln().scale(-target);
    let neg = p.affine(-1.0, 1.0).ln().scale(-(1.0 - target));
    pos.add(neg).expect("scalar shapes agree")
}

/// Pixel-mean focal loss; `alpha` weighs positives and `1 - alpha` negatives.
pub fn focal<'t>(map: Var<'t>, gt: &Tensor, gamma: f64, alpha: f64) -> Result<Var<'t>> {
    if map.shape() != gt.shape() {
        return Err(Error::dim("focal", &map.shape(), gt.shape()));
    }
    let tape = map.tape();
    let p = map.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = p.affine(-1.0, 1.0);
    let pos_mask = tape.constant(gt);
    let neg_mask = tape.constant_raw(gt.shape().to_vec(), gt.data().iter().map(|g| 1.0 - g).collect())?;
    let pos = q.powf(gamma).mul(p.ln())?.mul(pos_mask)?.scale(alpha);
    let neg = p.powf(gamma).mul(q.ln())?.mul(neg_mask)?.scale(1.0 - alpha);
    Ok(pos.add(neg)?.mean().scale(-1.0))
}

/// Soft dice loss `1 − (2Σ M·G + s)/(Σ M + Σ G + s)`.
pub fn dice<'t>(map: Var<'t>, gt: &Tensor, smooth: f64) -> Result<Var<'t>> {
    if map.shape() != gt.shape() {
        return Err(Error::dim("dice", &map.shape(), gt.shape()));
    }
    let g_sum: f64 = gt.data().iter().sum();
    let overlap = map.mul(map.tape().constant(gt))?.sum().affine(2.0, smooth);
    let denom = map.sum().affine(1.0, g_sum + smooth);
    Ok(overlap.mul(denom.powf(-1.0))?.affine(-1.0, 1.0))
}

/// Downsamples a binary mask; a cell is positive if any covered pixel is.
pub fn downsample_mask(mask: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 || target.0 == 0 || target.1 == 0 || target.0 > s[0] || target.1 > s[1] {
        return Err(Error::dim("downsample_mask", s, &[target.0, target.1]));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = vec![0.0; target.0 * target.1];
    for (i, row) in out.chunks_mut(target.1).enumerate() {
        let (r0, r1) = (i * h / target.0, ((i + 1) * h).div_ceil(target.0));
        for (j, cell) in row.iter_mut().enumerate() {
            let (c0, c1) = (j * w / target.1, ((j + 1) * w).div_ceil(target.1));
            let hit = (r0..r1).any(|r| (c0..c1).any(|c| mask.data()[r * w + c] > 0.5));
            *cell = if hit { 1.0 } else { 0.0 };
        }
    }
    Tensor::new([target.0, target.1], out)
}

/// Weighted loss terms of one batch, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub global: Var<'t>,
    pub focal: Var<'t>,
    pub dice: Var<'t>,
    pub kl: Var<'t>,
    pub rec: Var<'t>,
    pub balance: Var<'t>,
}

impl<'t> LossTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.global
            .add(self.focal)?
            .add(self.dice)?
            .add(self.kl)?
            .add(self.rec)?
            .add(self.balance)
    }

    pub fn values(&self) -> LossReport {
        LossReport {
            global: self.global.item(),
            local_focal: self.focal.item(),
            local_dice: self.dice.item(),
            kl: self.kl.item(),
            rec: self.rec.item(),
            balance: self.balance.item(),
        }
    }

    /// Evaluates every term; a non-finite term is reported by name.
    pub fn report(&self) -> Result<LossReport> {
        let r = self.values();
        if let Some(name) = r.first_non_finite() {
            return Err(Error::Numeric(format!("loss component {name} is not finite")));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global: f64,
    pub local_focal: f64,
    pub local_dice: f64,
    pub kl: f64,
    pub rec: f64,
    pub balance: f64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.global + self.local_focal + self.local_dice + self.kl + self.rec + self.balance
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("global", self.global),
            ("focal", self.local_focal),
            ("dice", self.local_dice),
            ("kl", self.kl),
            ("rec", self.rec),
            ("balance", self.balance),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}
