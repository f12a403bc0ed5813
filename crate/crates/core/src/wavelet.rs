//! Undecimated single-level 2D Haar transform of `H×W×C` feature grids.
//!
//! For each pixel the 2×2 neighborhood `a = F[i,j]`, `b = F[i,j+1]`,
//! `c = F[i+1,j]`, `d = F[i+1,j+1]` (replicate padding past the last row and
//! column) yields
//!
//! ```text
//! L  = (a + b + c + d) / 4      LH = (a - b + c - d) / 4
//! HL = (a + b - c - d) / 4      HH = (a - b - c + d) / 4
//! ```
//!
//! so the four bands have the input's shape and sum back to it exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub low: Tensor,
    /// Horizontal detail.
    pub lh: Tensor,
    /// Vertical detail.
    pub hl: Tensor,
    /// Diagonal detail.
    pub hh: Tensor,
}

pub fn haar_decompose(f: &Tensor) -> Result<WaveletBands> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(Error::dim("haar_decompose", shape, &[3]));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h < 2 || w < 2 {
        return Err(Error::Input(format!(
            "haar transform needs at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    let x = f.data();
    let n = x.len();
    let (mut low, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..h {
        let i1 = (i + 1).min(h - 1);
        for j in 0..w {
            let j1 = (j + 1).min(w - 1);
            let (pa, pb, pc, pd) = (
                (i * w + j) * c,
                (i * w + j1) * c,
                (i1 * w + j) * c,
                (i1 * w + j1) * c,
            );
            for k in 0..c {
                let (a, b, cc, d) = (x[pa + k], x[pb + k], x[pc + k], x[pd + k]);
                low[pa + k] = (a + b + cc + d) / 4.0;
                lh[pa + k] = (a - b + cc - d) / 4.0;
                hl[pa + k] = (a + b - cc - d) / 4.0;
                hh[pa + k] = (a - b - cc + d) / 4.0;
            }
        }
    }
    let s = shape.to_vec();
    Ok(WaveletBands {
        low: Tensor::new(s.clone(), low)?,
        lh: Tensor::new(s.clone(), lh)?,
        hl: Tensor::new(s.clone(), hl)?,
        hh: Tensor::new(s, hh)?,
    })
}

/// `F_H = F_LH + F_HL + F_HH`.
pub fn high_freq_aggregate(bands: &WaveletBands) -> Tensor {
    let mut out = bands.lh.clone();
    for ((o, b), c) in out
        .data_mut()
        .iter_mut()
        .zip(bands.hl.data())
        .zip(bands.hh.data())
    {
        *o += b + c;
    }
    out
}

impl WaveletBands {
    /// Sum of all four bands; equals the decomposed input.
    pub fn reconstruct(&self) -> Tensor {
        let mut out = self.low.clone();
        for (((o, a), b), c) in out
            .data_mut()
            .iter_mut()
            .zip(self.lh.data())
            .zip(self.hl.data())
            .zip(self.hh.data())
        {
            *o += a + b + c;
        }
        out
    }
}
