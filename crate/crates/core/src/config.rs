//! Run configuration, read from strict JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::samoe::MoeShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modules {
    pub ctds: bool,
    pub wcma: bool,
    pub samoe: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Self::ALL
    }
}

impl Modules {
    pub const NONE: Self = Self {
        ctds: false,
        wcma: false,
        samoe: false,
    };
    pub const ALL: Self = Self {
        ctds: true,
        wcma: true,
        samoe: true,
    };

    /// The five ablation rows, baseline first and full model last.
    pub fn ablation_rows() -> [(&'static str, Modules); 5] {
        let ctds = Self {
            ctds: true,
            ..Self::NONE
        };
        [
            ("baseline", Self::NONE),
            ("+ctds", ctds),
            ("+ctds+wcma", Self { wcma: true, ..ctds }),
            ("+ctds+samoe", Self { samoe: true, ..ctds }),
            ("full", Self::ALL),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 20,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSpec,
    /// Learnable prompt slots per prompt.
    pub m: usize,
    pub experts: usize,
    pub top_k: usize,
    pub tau: f64,
    /// Tapped layer count; must match `encoder.taps`.
    pub layers: usize,
    pub latent_dim: usize,
    pub loss: LossSpec,
    pub optim: OptimSpec,
    pub modules: Modules,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderSpec::default();
        Self {
            seed: 0,
            layers: encoder.taps,
            encoder,
            m: 2,
            experts: 8,
            top_k: 2,
            tau: 0.07,
            latent_dim: 16,
            loss: LossSpec::default(),
            optim: OptimSpec::default(),
            modules: Modules::ALL,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Small-machine preset: batch 16, otherwise the defaults.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.optim.batch = 16;
        c.optim.lr = 5e-4;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn moe_shape(&self) -> MoeShape {
        MoeShape {
            dim: self.encoder.dim,
            layers: self.layers,
            experts: self.experts,
            top_k: self.top_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.layers != self.encoder.taps {
            return Err(Error::Config(format!(
                "layers {} does not match encoder taps {}",
                self.layers, self.encoder.taps
            )));
        }
        self.moe_shape().validate()?;
        if self.m == 0 || self.latent_dim == 0 {
            return Err(Error::Config("m and latent_dim must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite())
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.batch == 0
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.loss.validate()
    }
}
