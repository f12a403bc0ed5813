//! Layer-level building blocks on top of the tape.

use rand::Rng;

use crate::autodiff::{ParamVars, Var};
use crate::error::{Error, Result};
use crate::tensor::{NamedParamSet, Tensor};

/// Global average pooling of an `H×W×C` grid to a `C` vector.
pub fn gap<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::dim("gap", &shape, &[3]));
    }
    Ok(x.mean_rows())
}

/// Per-pixel channel map `y[i,j] = x[i,j] · w + b` on an `H×W×C` grid.
pub fn pointwise_conv<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
    if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || sb != [sw[1]] {
        return Err(Error::dim("pointwise_conv", &sx, &sw));
    }
    let (h, wd) = (sx[0], sx[1]);
    let flat = x.reshape([h * wd, sx[2]])?;
    flat.matmul(w)?.add_row(b)?.reshape([h, wd, sw[1]])
}

/// Affine layer stored as `{prefix}.weight` (`out×in`) and `{prefix}.bias`.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'a> {
    prefix: &'a str,
    bias: bool,
}

impl<'a> Linear<'a> {
    pub fn new(prefix: &'a str) -> Self {
        Self { prefix, bias: true }
    }

    pub fn no_bias(prefix: &'a str) -> Self {
        Self { prefix, bias: false }
    }

    /// Registers uniform `±1/√in` weights and zero bias.
    pub fn init(
        &self,
        params: &mut NamedParamSet,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (input as f64).sqrt();
        params.insert(
            format!("{}.weight", self.prefix),
            Tensor::uniform([output, input], bound, rng),
        )?;
        if self.bias {
            params.insert(format!("{}.bias", self.prefix), Tensor::zeros([output]))?;
        }
        Ok(())
    }

    /// Applies to a vector (`[in]`) or a batch of rows (`[n, in]`).
    pub fn forward<'t>(&self, p: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = p.get(&format!("{}.weight", self.prefix))?;
        let shape = x.shape();
        let rows = match shape.len() {
            1 => x.reshape([1, shape[0]])?,
            2 => x,
            _ => return Err(Error::dim("linear", &shape, &w.shape())),
        };
        let mut y = rows.matmul(w.transpose()?)?;
        if self.bias {
            y = y.add_row(p.get(&format!("{}.bias", self.prefix))?)?;
        }
        if shape.len() == 1 {
            let out = y.shape()[1];
            y = y.reshape([out])?;
        }
        Ok(y)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    first: String,
    second: String,
}

impl Mlp {
    pub fn new(prefix: &str) -> Self {
        Self {
            first: format!("{prefix}.0"),
            second: format!("{prefix}.1"),
        }
    }

    pub fn init(
        &self,
        params: &mut NamedParamSet,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        Linear::new(&self.first).init(params, input, hidden, rng)?;
        Linear::new(&self.second).init(params, hidden, output, rng)
    }

    pub fn forward<'t>(&self, p: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = Linear::new(&self.first).forward(p, x)?.relu();
        Linear::new(&self.second).forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new([h, w, c], data).unwrap()
    }

    #[test]
    fn gap_cases() {
        let tape = Tape::new();
        let c = tape.constant(&Tensor::full([3, 4, 2], 0.75));
        assert_eq!(gap(c).unwrap().to_vec(), vec![0.75, 0.75]);
        let one = tape.constant(&grid(1, 1, 3, vec![1.0, 2.0, 3.0]));
        assert_eq!(gap(one).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);
        let x = tape.constant(&grid(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(gap(x).unwrap().to_vec(), vec![2.5]);
        let bad = tape.constant(&Tensor::zeros([4, 2]));
        assert!(gap(bad).is_err());
    }

    #[test]
    fn pointwise_conv_cases() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(&grid(3, 2, 3, data.clone()));
        let eye = tape.constant(&Tensor::eye(3));
        let zero = tape.constant(&Tensor::zeros([3]));
        assert_eq!(pointwise_conv(x, eye, zero).unwrap().to_vec(), data);

        let w = tape.constant(&Tensor::new([3, 3], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap());
        let b = tape.constant(&Tensor::vector(vec![0.1, 0.2, 0.3]));
        let px = tape.constant(&grid(1, 1, 3, vec![1.0, -2.0, 0.5]));
        let conv = pointwise_conv(px, w, b).unwrap().to_vec();
        let row = tape.constant(&Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let direct = row.matmul(w).unwrap().add_row(b).unwrap().to_vec();
        assert_eq!(conv, direct);

        let flat = tape.constant(&Tensor::full([4, 4, 3], 0.3));
        let y = pointwise_conv(flat, w, b).unwrap().value();
        for i in 0..4 {
            for j in 0..4 {
                for ch in 0..3 {
                    assert_eq!(y.at(&[i, j, ch]), y.at(&[0, 0, ch]));
                }
            }
        }
        let wrong = tape.constant(&Tensor::eye(2));
        assert!(pointwise_conv(flat, wrong, zero).is_err());
    }
}
