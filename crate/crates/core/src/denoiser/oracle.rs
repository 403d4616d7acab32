//! Independent validation route for the noise prediction.
//!
//! Computes `E[eps | x_t = x]` from the per-component Gaussian posteriors of
//! `x_0` (Tweedie route): responsibilities from plain density ratios, component
//! posterior means from an explicit inverse. Nothing here is shared with the
//! Cholesky score route in the parent module.

use nalgebra::{DMatrix, DVector};

use super::DenoiserOutput;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, GmmWorld};

pub fn quadrature_epsilon(
    w: &GmmWorld,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    c: &Condition,
) -> Result<DenoiserOutput> {
    if t == 0 || t > s.steps() {
        return Err(Error::StepOutOfRange { t, steps: s.steps() });
    }
    if x.len() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), got: x.len() });
    }
    let active = w.active_components(c)?;
    let a = s.alpha_bar(t);
    let ra = a.sqrt();
    let d = w.dim();

    let mut log_dens = Vec::with_capacity(active.len());
    let mut post_means = Vec::with_capacity(active.len());
    for &k in &active {
        let comp = &w.components()[k];
        let marg_cov = &comp.cov * a + DMatrix::identity(d, d) * (1.0 - a);
        let inv = marg_cov.clone().try_inverse().expect("noised covariance is invertible");
        let dev = x - &comp.mean * ra;
        let quad = dev.dot(&(&inv * &dev));
        log_dens.push(comp.weight.ln() - 0.5 * marg_cov.determinant().ln() - 0.5 * quad);
        // E[x0 | x_t, k] = mu_k + sqrt(abar) Sigma_k C_k^{-1} (x - sqrt(abar) mu_k)
        post_means.push(&comp.mean + &comp.cov * (&inv * &dev) * ra);
    }
    let peak = log_dens.iter().cloned().fold(f64::MIN, f64::max);
    let dens: Vec<f64> = log_dens.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = dens.iter().sum();
    let x0_mean = dens.iter().zip(&post_means).fold(DVector::zeros(d), |acc, (p, m)| acc + m * (p / total));

    let eps_hat = (x - &x0_mean * ra) / (1.0 - a).sqrt();
    Ok(DenoiserOutput { eps_hat, x0_hat: x0_mean })
}
