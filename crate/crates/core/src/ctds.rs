//! Class-token distribution sampling: a small VAE over the class token whose
//! reconstructions are added to the learnable prompt slots.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::encoder::{TextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::ops::{Linear, Mlp};
use crate::tensor::{NamedParamSet, Tensor};

pub const NORMAL_TEMPLATE: [&str; 5] = ["a", "photo", "of", "a", "good"];
pub const ABNORMAL_TEMPLATE: [&str; 5] = ["a", "photo", "of", "a", "damaged"];

pub const PROMPT_NORMAL: &str = "prompt.normal";
pub const PROMPT_ABNORMAL: &str = "prompt.abnormal";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Draw fresh noise for every sample.
    Train,
    /// Use the posterior mean.
    Eval,
}

/// Registers the VAE (`ctds.*`) parameters.
pub fn init_vae(params: &mut NamedParamSet, dim: usize, latent: usize, rng: &mut impl Rng) -> Result<()> {
    if latent == 0 {
        return Err(Error::Config("latent dim must be positive".into()));
    }
    Mlp::new("ctds.mlp").init(params, dim, dim, dim, rng)?;
    Linear::no_bias("ctds.w_mu").init(params, dim, latent, rng)?;
    Linear::no_bias("ctds.w_sigma").init(params, dim, latent, rng)?;
    Mlp::new("ctds.decoder").init(params, latent, dim, dim, rng)
}

/// Registers the learnable normal/abnormal slot vectors, `m×C` each.
pub fn init_prompts(params: &mut NamedParamSet, dim: usize, m: usize, rng: &mut impl Rng) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("prompt length m must be at least 1".into()));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    params.insert(PROMPT_NORMAL, Tensor::uniform([m, dim], bound, rng))?;
    params.insert(PROMPT_ABNORMAL, Tensor::uniform([m, dim], bound, rng))
}

#[derive(Clone, Debug)]
pub struct LatentDraw<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
    pub samples: Vec<Var<'t>>,
    pub recon: Vec<Var<'t>>,
}

/// Encodes `x_c` to `(mu, log_var)`, draws `m` reparameterized latents and
/// decodes each one.
pub fn encode_sample<'t>(
    p: &ParamVars<'t>,
    class_token: Var<'t>,
    m: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LatentDraw<'t>> {
    if m == 0 {
        return Err(Error::Contract("m must be at least 1".into()));
    }
    let hidden = Mlp::new("ctds.mlp").forward(p, class_token)?;
    let mu = Linear::no_bias("ctds.w_mu").forward(p, hidden)?;
    let log_var = Linear::no_bias("ctds.w_sigma").forward(p, hidden)?;
    let tape = mu.tape();
    let latent = mu.shape()[0];
    let std = log_var.scale(0.5).exp();
    let decoder = Mlp::new("ctds.decoder");
    let mut samples = Vec::with_capacity(m);
    let mut recon = Vec::with_capacity(m);
    for _ in 0..m {
        let s = match mode {
            Mode::Eval => mu,
            Mode::Train => {
                let eps: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
                mu.add(std.mul(tape.constant_raw([latent], eps)?)?)?
            }
        };
        recon.push(decoder.forward(p, s)?);
        samples.push(s);
    }
    Ok(LatentDraw {
        mu,
        log_var,
        samples,
        recon,
    })
}

/// `-½ Σ (1 + log σ² − μ² − σ²)` over latent dims.
pub fn kl_loss<'t>(mu: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let inner = log_var.affine(1.0, 1.0).sub(mu.square())?.sub(log_var.exp())?;
    Ok(inner.sum().scale(-0.5))
}

/// Closed-form KL divergence of `N(mu, exp(log_var))` from `N(0, I)`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Squared distance `‖r − x_c‖²`, averaged over the draws.
pub fn rec_loss<'t>(recon: &[Var<'t>], class_token: Var<'t>) -> Result<Var<'t>> {
    let first = recon
        .first()
        .ok_or_else(|| Error::Contract("no reconstructions".into()))?;
    let mut total = first.sub(class_token)?.square().sum();
    for r in &recon[1..] {
        total = total.add(r.sub(class_token)?.square().sum())?;
    }
    Ok(total.scale(1.0 / recon.len() as f64))
}

/// Builds normal/abnormal token sequences: template words followed by the
/// `m` slots `r_i + v_i`. Without a draw the slots are the raw `v_i`.
pub fn build_prompts<'t>(
    text: &TextEncoder,
    p: &ParamVars<'t>,
    draw: Option<&LatentDraw<'t>>,
) -> Result<(TokenSequence<'t>, TokenSequence<'t>)> {
    let v_n = p.get(PROMPT_NORMAL)?;
    let v_a = p.get(PROMPT_ABNORMAL)?;
    let m = v_n.shape()[0];
    if let Some(d) = draw {
        if d.recon.len() != m {
            return Err(Error::Contract(format!(
                "{} reconstructions for {m} prompt slots",
                d.recon.len()
            )));
        }
    }
    let tape = v_n.tape();
    let make = |words: &[&str], v: Var<'t>| -> Result<TokenSequence<'t>> {
        let mut rows = text.template(tape, words)?;
        let mut slot_mask = vec![false; rows.len()];
        for i in 0..m {
            let slot = v.row(i)?;
            rows.push(match draw {
                Some(d) => d.recon[i].add(slot)?,
                None => slot,
            });
            slot_mask.push(true);
        }
        Ok(TokenSequence {
            tokens: tape.stack(&rows)?,
            slot_mask,
        })
    };
    Ok((make(&NORMAL_TEMPLATE, v_n)?, make(&ABNORMAL_TEMPLATE, v_a)?))
}

/// Encodes both prompts into a `2×C` matrix: row 0 normal, row 1 abnormal.
pub fn text_embeddings<'t>(
    text: &TextEncoder,
    normal: &TokenSequence<'t>,
    abnormal: &TokenSequence<'t>,
) -> Result<Var<'t>> {
    let tape: &'t Tape = normal.tokens.tape();
    tape.stack(&[text.encode(normal)?, text.encode(abnormal)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderSpec;
    use crate::optim::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 8;

    fn setup(seed: u64) -> (NamedParamSet, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NamedParamSet::new();
        init_vae(&mut p, C, C / 2, &mut rng).unwrap();
        init_prompts(&mut p, C, 2, &mut rng).unwrap();
        let spec = EncoderSpec {
            dim: C,
            ..EncoderSpec::default()
        };
        (p, TextEncoder::new(&spec).unwrap())
    }

    fn class_token() -> Tensor {
        Tensor::vector((0..C).map(|i| (i as f64 * 0.7).cos()).collect())
    }

    #[test]
    fn eval_mode_samples_equal_mu() {
        let (p, _) = setup(1);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.constant(&class_token());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = encode_sample(&b, x, 3, Mode::Eval, &mut rng).unwrap();
        assert_eq!(d.samples.len(), 3);
        assert_eq!(d.recon.len(), 3);
        for s in &d.samples {
            assert_eq!(s.to_vec(), d.mu.to_vec());
        }
        assert_eq!(d.recon[0].to_vec(), d.recon[2].to_vec());
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let (p, _) = setup(1);
        let draw = |seed| {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let x = tape.constant(&class_token());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = encode_sample(&b, x, 2, Mode::Train, &mut rng).unwrap();
            d.samples.iter().map(|s| s.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let d = draw(5);
        assert_ne!(d[0], d[1]);
    }

    #[test]
    fn kl_hand_values() {
        let tape = Tape::new();
        let zero = tape.constant(&Tensor::zeros([4]));
        assert_eq!(kl_loss(zero, zero).unwrap().item(), 0.0);
        let ones = tape.constant(&Tensor::full([4], 1.0));
        // sigma = 1 means log_var = 0; each term is -½(1 + 0 - 1 - 1) = ½.
        assert_eq!(kl_loss(ones, zero).unwrap().item(), 2.0);
        assert_eq!(kl_divergence(&[1.0; 4], &[0.0; 4]), 2.0);
    }

    #[test]
    fn rec_hand_values() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![0.0, 0.0]));
        let r = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(rec_loss(&[r], x).unwrap().item(), 5.0);
        assert_eq!(rec_loss(&[x], x).unwrap().item(), 0.0);
        let unit = tape.constant(&Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(rec_loss(&[unit, unit], x).unwrap().item(), 1.0);
    }

    #[test]
    fn zero_recon_leaves_raw_slots() {
        let (p, text) = setup(2);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let zero = tape.constant(&Tensor::zeros([C]));
        let draw = LatentDraw {
            mu: zero,
            log_var: zero,
            samples: vec![zero, zero],
            recon: vec![zero, zero],
        };
        let (n, a) = build_prompts(&text, &b, Some(&draw)).unwrap();
        assert_eq!(n.len(), 7);
        assert_eq!(n.slot_mask, vec![false, false, false, false, false, true, true]);
        let toks = n.tokens.value();
        let v = p.get(PROMPT_NORMAL).unwrap();
        assert_eq!(&toks.data()[5 * C..], v.data());
        assert_eq!(
            &a.tokens.value().data()[5 * C..],
            p.get(PROMPT_ABNORMAL).unwrap().data()
        );

        let short = LatentDraw {
            recon: vec![zero],
            ..draw
        };
        assert!(matches!(
            build_prompts(&text, &b, Some(&short)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn text_embedding_rows() {
        let (mut p, text) = setup(3);
        let v = p.get(PROMPT_NORMAL).unwrap().clone();
        p.get_mut(PROMPT_ABNORMAL)
            .unwrap()
            .data_mut()
            .copy_from_slice(v.data());
        let tape = Tape::new();
        let b = p.bind(&tape);
        let (n, a) = build_prompts(&text, &b, None).unwrap();
        let ft = text_embeddings(&text, &n, &a).unwrap().value();
        for r in 0..2 {
            let norm: f64 = (0..C).map(|j| ft.at(&[r, j]).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        // Identical slots still differ through the good/damaged template word.
        assert_ne!(ft.at(&[0, 0]), ft.at(&[1, 0]));

        let row0 = |p: &NamedParamSet| {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let (n, a) = build_prompts(&text, &b, None).unwrap();
            let ft = text_embeddings(&text, &n, &a).unwrap().to_vec();
            ft[..C].to_vec()
        };
        let before = row0(&p);
        p.get_mut(PROMPT_ABNORMAL).unwrap().data_mut()[0] += 0.5;
        assert_eq!(before, row0(&p));
    }

    #[test]
    fn same_template_and_slots_give_identical_rows() {
        let (mut p, text) = setup(3);
        let v = p.get(PROMPT_NORMAL).unwrap().clone();
        p.get_mut(PROMPT_ABNORMAL)
            .unwrap()
            .data_mut()
            .copy_from_slice(v.data());
        let tape = Tape::new();
        let b = p.bind(&tape);
        let (n, _) = build_prompts(&text, &b, None).unwrap();
        let n2 = n.clone();
        let ft = text_embeddings(&text, &n, &n2).unwrap().value();
        assert_eq!(&ft.data()[..C], &ft.data()[C..]);
    }

    #[test]
    fn slot_gradient_matches_recon_gradient() {
        // d/dv_i and d/dr_i agree because both enter as r_i + v_i.
        let (p, text) = setup(4);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let r = tape.leaf(&Tensor::vector(vec![0.1; C]).with_requires_grad(true));
        let draw = LatentDraw {
            mu: r,
            log_var: r,
            samples: vec![r, r],
            recon: vec![r, r],
        };
        let (n, a) = build_prompts(&text, &b, Some(&draw)).unwrap();
        let ft = text_embeddings(&text, &n, &a).unwrap();
        let target = tape.constant(&Tensor::new([2, C], (0..2 * C).map(|i| i as f64).collect()).unwrap());
        let loss = ft.mul(target).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let gv_n = g.get(b.get(PROMPT_NORMAL).unwrap()).unwrap();
        let gv_a = g.get(b.get(PROMPT_ABNORMAL).unwrap()).unwrap();
        let gr = g.get(r).unwrap();
        for j in 0..C {
            let via_slots: f64 = (0..2).map(|i| gv_n[i * C + j] + gv_a[i * C + j]).sum();
            assert!((via_slots - gr[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn ctds_gradients_match_finite_differences() {
        let (p, text) = setup(5);
        let report = grad_check(
            &p,
            |tape, b| {
                let x = tape.constant(&class_token());
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let d = encode_sample(b, x, 2, Mode::Train, &mut rng)?;
                let (n, a) = build_prompts(&text, b, Some(&d))?;
                let ft = text_embeddings(&text, &n, &a)?;
                let probe = tape.constant(&Tensor::new(
                    [2, C],
                    (0..2 * C).map(|i| (i as f64).sin()).collect(),
                )?);
                ft.mul(probe)?
                    .sum()
                    .add(kl_loss(d.mu, d.log_var)?)?
                    .add(rec_loss(&d.recon, x)?)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{:?}", report.worst);
    }
}
