//! Small neural-network toolkit on top of `candle`: seeded parameters,
//! layers, front-ends, the x-vector style encoder and the AAM head.

pub mod aam;
pub mod frontend;
pub mod layers;
pub mod params;
pub mod xvector;

pub use aam::{aam_logit_adjust, AamHead};
pub use params::{CheckpointMeta, Init, ParamStore};

use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Adam without weight decay.
pub fn adam(vars: Vec<candle_core::Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0 })?)
}

pub fn set_lr(opt: &mut AdamW, lr: f64) {
    opt.set_learning_rate(lr);
}
