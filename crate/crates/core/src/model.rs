//! The full detector: frozen encoders plus the trainable modules, with
//! per-module toggles for ablation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamVars, Tape, Var};
use crate::config::{Modules, RunConfig};
use crate::ctds::{self, LatentDraw, Mode};
use crate::encoder::{FeatureBundle, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::loss::{bce, dice, downsample_mask, focal, LossTerms};
use crate::samoe::{self, RouterOutput};
use crate::tensor::{NamedParamSet, Tensor};
use crate::wavelet::{haar_decompose, high_freq_aggregate};
use crate::wcma;

/// Seed stream for parameter initialization, apart from the encoders'.
const INIT_STREAM: u64 = 0x696e_6974;

/// Encoder output plus everything derivable from it without parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: FeatureBundle,
    /// `(F_L, F_H)` per tapped layer.
    pub bands: Vec<(Tensor, Tensor)>,
}

impl Prepared {
    pub fn new(features: FeatureBundle) -> Result<Self> {
        let bands = features
            .layers
            .iter()
            .map(|(_, grid)| {
                let b = haar_decompose(grid)?;
                let high = high_freq_aggregate(&b);
                Ok((b.low, high))
            })
            .collect::<Result<_>>()?;
        Ok(Self { features, bands })
    }
}

/// One image's forward pass, still on the tape.
#[derive(Clone, Debug)]
pub struct Forward<'t> {
    pub s_txt: Var<'t>,
    /// Per-layer maps at grid resolution.
    pub layer_maps: Vec<Var<'t>>,
    /// Mean of the layer maps at grid resolution.
    pub fused: Var<'t>,
    pub score_raw: Var<'t>,
    pub score_norm: Var<'t>,
    pub draw: Option<LatentDraw<'t>>,
    pub routing: Option<RouterOutput<'t>>,
}

#[derive(Clone, Debug)]
pub struct ImageScore {
    /// `s_txt + max(M)`, in `[0, 2]`.
    pub raw: f64,
    pub s_txt: f64,
    /// Fused map upsampled to image resolution.
    pub map: Tensor,
}

/// A labelled training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub prepared: Prepared,
    pub label: u8,
    /// Mask downsampled to the patch grid.
    pub grid_mask: Tensor,
}

impl Example {
    pub fn new(prepared: Prepared, label: u8, mask: &Tensor) -> Result<Self> {
        let grid_mask = downsample_mask(mask, prepared.features.grid())?;
        Ok(Self {
            prepared,
            label,
            grid_mask,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: RunConfig,
    image: ImageEncoder,
    text: TextEncoder,
    pub params: NamedParamSet,
}

impl Model {
    /// Builds encoders and initializes only the enabled modules' parameters.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let image = ImageEncoder::new(&config.encoder)?;
        let text = TextEncoder::new(&config.encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let dim = config.encoder.dim;
        let mut params = NamedParamSet::new();
        ctds::init_prompts(&mut params, dim, config.m, &mut rng)?;
        let Modules {
            ctds: c,
            wcma: w,
            samoe: s,
        } = config.modules;
        if c {
            ctds::init_vae(&mut params, dim, config.latent_dim, &mut rng)?;
        }
        if w {
            wcma::init_params(&mut params, dim, &mut rng)?;
        }
        if s {
            samoe::init_params(&mut params, config.moe_shape(), &mut rng)?;
        }
        Ok(Self {
            config,
            image,
            text,
            params,
        })
    }

    /// Rebuilds a model from a config and stored parameters, checking that
    /// every expected tensor is present with the expected shape.
    pub fn with_params(config: RunConfig, params: NamedParamSet) -> Result<Self> {
        let mut model = Self::new(config)?;
        for (path, fresh) in model.params.iter() {
            let stored = params.get(path).ok_or_else(|| Error::Mismatch {
                field: path.to_string(),
                expected: format!("{:?}", fresh.shape()),
                found: "missing".into(),
            })?;
            if stored.shape() != fresh.shape() {
                return Err(Error::Mismatch {
                    field: "C".into(),
                    expected: format!("{path} {:?}", fresh.shape()),
                    found: format!("{:?}", stored.shape()),
                });
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::Mismatch {
                field: "parameters".into(),
                expected: model.params.len().to_string(),
                found: params.len().to_string(),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn prepare(&self, pixels: &Tensor) -> Result<Prepared> {
        Prepared::new(self.image.encode(pixels)?)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        input: &Prepared,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let feats = &input.features;
        let x_c = tape.constant(&feats.class_token);
        let draw = if cfg.modules.ctds {
            Some(ctds::encode_sample(p, x_c, cfg.m, mode, rng)?)
        } else {
            None
        };
        let (seq_n, seq_a) = ctds::build_prompts(&self.text, p, draw.as_ref())?;
        let text = ctds::text_embeddings(&self.text, &seq_n, &seq_a)?;

        let grids: Vec<Var<'t>> = feats.layers.iter().map(|(_, g)| tape.constant(g)).collect();
        let mut layer_maps = Vec::with_capacity(grids.len());
        for (grid, (low, high)) in grids.iter().zip(&input.bands) {
            let map = if cfg.modules.wcma {
                let fp = wcma::frequency_attention(p, tape.constant(low), tape.constant(high))?;
                let att = wcma::cross_attend(p, text, fp)?;
                wcma::anomaly_map(att.refined, fp, cfg.tau)?
            } else {
                wcma::anomaly_map(text, *grid, cfg.tau)?
            };
            layer_maps.push(map);
        }
        let fused = wcma::fuse_maps(&layer_maps, feats.grid())?;

        let (x_p, routing) = if cfg.modules.samoe {
            let x_a = samoe::adapter_pool(p, &grids)?;
            let r = samoe::route(p, x_a, cfg.top_k)?;
            (Some(samoe::moe_aggregate(p, &r, x_a)?), Some(r))
        } else {
            (None, None)
        };
        let s_txt = samoe::image_score(x_p, x_c, text, cfg.tau)?;
        let (score_raw, score_norm) = samoe::final_score(s_txt, fused)?;
        Ok(Forward {
            s_txt,
            layer_maps,
            fused,
            score_raw,
            score_norm,
            draw,
            routing,
        })
    }

    /// Batch-averaged, weighted loss terms.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        batch: &[&Example],
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let spec = &self.config.loss;
        let mut sums: [Option<Var<'t>>; 6] = Default::default();
        let mut push = |slot: usize, v: Var<'t>| -> Result<()> {
            sums[slot] = Some(match sums[slot] {
                Some(acc) => acc.add(v)?,
                None => v,
            });
            Ok(())
        };
        for ex in batch {
            let fw = self.forward(tape, p, &ex.prepared, Mode::Train, rng)?;
            push(0, bce(fw.score_norm, f64::from(ex.label)))?;
            for map in &fw.layer_maps {
                push(1, focal(*map, &ex.grid_mask, spec.gamma, spec.alpha)?)?;
                push(2, dice(*map, &ex.grid_mask, spec.smooth)?)?;
            }
            if let Some(d) = &fw.draw {
                push(3, ctds::kl_loss(d.mu, d.log_var)?)?;
                push(
                    4,
                    ctds::rec_loss(&d.recon, tape.constant(&ex.prepared.features.class_token))?,
                )?;
            }
            if let (Some(r), true) = (&fw.routing, spec.weights.balance > 0.0) {
                push(5, samoe::balance_penalty(r)?)?;
            }
        }
        let w = &spec.weights;
        let scale = 1.0 / batch.len() as f64;
        let term = |slot: usize, weight: f64| match sums[slot] {
            Some(v) => v.scale(scale * weight),
            None => tape.scalar(0.0),
        };
        Ok(LossTerms {
            global: term(0, w.global),
            focal: term(1, w.focal),
            dice: term(2, w.dice),
            kl: term(3, w.kl),
            rec: term(4, w.rec),
            balance: term(5, w.balance),
        })
    }

    /// Deterministic inference on prepared features.
    pub fn score(&self, input: &Prepared) -> Result<ImageScore> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        // Eval mode draws no noise; the generator is never consulted.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fw = self.forward(&tape, &p, input, Mode::Eval, &mut rng)?;
        let map = wcma::upsample(&fw.fused.value(), self.config.encoder.image_size)?;
        Ok(ImageScore {
            raw: fw.score_raw.item(),
            s_txt: fw.s_txt.item(),
            map,
        })
    }

    pub fn score_pixels(&self, pixels: &Tensor) -> Result<ImageScore> {
        self.score(&self.prepare(pixels)?)
    }
}
