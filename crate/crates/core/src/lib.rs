//! Reverse personalization for identity anonymization, on an analytic
//! Gaussian-mixture world.
//!
//! A [`GmmWorld`] stands in for the data manifold: each component carries an
//! identity and an attribute label, and its noised marginals give an exact
//! denoiser. Inputs are inverted under a null identity, then regenerated with
//! classifier-free guidance pushed away from their extracted identity.

pub mod anonymizer;
pub mod attribute;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod inversion;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod world;

pub use anonymizer::{anonymize, anonymize_batch, recovery_attack, AttributeMode};
pub use attribute::attribute_swap;
pub use denoiser::{adapter_epsilon, analytic_epsilon, dual_attention, quadrature_epsilon, DenoiserOutput};
pub use error::{Error, Result};
pub use guidance::{guided_epsilon, sample_with_trajectory, GuidanceConfig, Guide};
pub use inversion::{ddim_invert, ddpm_invert, mu_estimate, LatentTrajectory, Solver};
pub use metrics::{evaluate_batch, sweep, tradeoff_table, MetricsRecord};
pub use schedule::{build_schedule, marginal_coeffs, NoiseSchedule, ScheduleKind};
pub use world::{AttributeLabel, Condition, GmmWorld, IdentityLabel};
