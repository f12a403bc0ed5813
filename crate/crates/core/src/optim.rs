//! Adam optimizer and the finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::NamedParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter; clears the grads.
    pub fn step(&mut self, params: &mut NamedParamSet) -> Result<()> {
        if let Some((path, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {path} has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = self.first.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if fewer).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_param: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    /// Worst relative error per parameter path.
    pub per_param: BTreeMap<String, f64>,
    pub coords_checked: usize,
    /// Every coordinate checked, in evaluation order.
    pub coords: Vec<CoordCheck>,
}

/// Compares autodiff gradients of a scalar `loss` against central differences.
///
/// `loss` is rebuilt on a fresh tape for every evaluation and must be a pure
/// function of the parameters; a repeated evaluation that differs in any bit
/// is reported as a contract error.
pub fn grad_check<F>(params: &NamedParamSet, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let eval = |p: &NamedParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        Ok(loss(&tape, &bound)?.item())
    };

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let root = loss(&tape, &bound)?;
    let base = root.item();
    let grads = tape.backward(root)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "loss is not deterministic across evaluations".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let var = bound.get(&path)?;
        let n = params.get(&path).expect("path from set").numel();
        let analytic_all = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let picks = sample(&mut rng, n, opts.coords_per_param.min(n)).into_vec();
        let mut worst_here = 0.0f64;
        for idx in picks {
            let orig = work.get(&path).unwrap().data()[idx];
            work.get_mut(&path).unwrap().data_mut()[idx] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(&path).unwrap().data_mut()[idx] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(&path).unwrap().data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = analytic_all[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            worst_here = worst_here.max(rel);
            let check = CoordCheck {
                path: path.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: rel,
            };
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(check.clone());
            }
            report.coords.push(check);
        }
        report.per_param.insert(path, worst_here);
    }
    Ok(report)
}
