//! Zero-shot anomaly detection with variational prompt sampling,
//! wavelet-enhanced cross-modal attention and mixture-of-experts scoring.
//!
//! The pretrained vision-language backbone is replaced by seeded frozen
//! encoders ([`encoder`]); everything downstream of the encoders is trained
//! with the in-crate autodiff tape ([`autodiff`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod ctds;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod samoe;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wcma;

pub use autodiff::{Gradients, ParamVars, Tape, Var};
pub use config::{Modules, RunConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{NamedParamSet, Tensor};
