//! Adversarial attacks on a speaker-identification network, estimation of
//! the adversarial perturbation with a conditional-GAN denoiser, and attack
//! signatures for classifying, verifying and detecting attacks.
//!
//! The pipeline runs end to end on small synthetic corpora:
//! [`corpus`] → [`victim`] → [`attacks`] → [`advest`] → [`signature`] → [`eval`].

pub mod error;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
pub use signal::{
    energy_vad, lp_norm, project_lp_ball, snr_db, NormOrder, ThreatModel, Waveform, SAMPLE_RATE,
};

pub mod corpus;
pub mod victim;
pub mod attacks;
pub mod advest;
pub mod signature;
pub mod eval;
