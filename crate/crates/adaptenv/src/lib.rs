//! Adaptive environment discovery for robust training.
//!
//! Robust objectives (IRM, REx, GroupDRO, CORAL) need training environments,
//! but good environments are rarely known up front. This crate treats the
//! environment itself as a learnable object: a policy distribution over a
//! transformation parameter `γ` is optimized jointly with the predictor, so
//! each robust objective discovers the environments it needs. The same
//! machinery runs the classical fixed-environment baselines through frozen
//! point-mass policies, which makes adaptive and fixed training directly
//! comparable (and bit-for-bit reproducible).
//!
//! The crate is organized around the pipeline:
//!
//! - [`policy`] — Beta / Gumbel-Softmax categorical policies over `γ`, their
//!   sampling, divergences, and gradient estimators;
//! - [`transforms`] — the transformation families `T_γ` (color correlation,
//!   rotation, spurious-group shift) and dataset construction, including
//!   IDX ingestion;
//! - [`objectives`] — per-environment risks, the robust penalties, and the
//!   policy-averaged training objective;
//! - [`nn`] — a small deterministic MLP with the custom backward seeds the
//!   penalties need, plus Adam;
//! - [`trainer`] — the alternating policy/model optimization loop;
//! - [`theory`] — numerical verification of the PAC-Bayes / KL-ball DRO
//!   bounds that justify the training objective;
//! - [`metrics`] — worst-case accuracy, per-environment profiles, policy
//!   statistics;
//! - [`experiment`] — dataset bundles and end-to-end runs driven by
//!   [`config::RunConfig`].

pub mod config;
pub mod error;
pub mod experiment;
pub mod fetch;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod policy;
pub mod special;
pub mod theory;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
