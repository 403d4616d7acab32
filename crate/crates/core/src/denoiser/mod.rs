//! Closed-form noise prediction for Gaussian-mixture worlds.
//!
//! At step `t` each component is convolved with the forward kernel:
//! `N(sqrt(abar) mu_k, abar Sigma_k + (1 - abar) I)`. The noise prediction is
//! `eps = -sqrt(1 - abar) * grad log p_t(x)`, restricted to the components
//! admitted by the [`Condition`].

mod attention;
mod oracle;

pub use attention::{attention, dual_attention};
pub use oracle::quadrature_epsilon;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, GmmWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: DVector<f64>,
    pub x0_hat: DVector<f64>,
}

impl DenoiserOutput {
    /// Pairs a noise prediction with its implied data prediction
    /// `(x - sqrt(1 - abar) eps) / sqrt(abar)`.
    pub fn from_epsilon(x: &DVector<f64>, eps_hat: DVector<f64>, alpha_bar: f64) -> Self {
        let x0_hat = (x - &eps_hat * (1.0 - alpha_bar).sqrt()) / alpha_bar.sqrt();
        Self { eps_hat, x0_hat }
    }
}

/// One component of the noised mixture at a fixed step.
#[derive(Debug, Clone)]
struct NoisedComponent {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `log w_k - 0.5 log det C_k`; the shared `2 pi` term is dropped.
    log_scale: f64,
}

fn noised_components(w: &GmmWorld, alpha_bar: f64) -> Vec<NoisedComponent> {
    let d = w.dim();
    w.components()
        .iter()
        .map(|c| {
            let cov = &c.cov * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar);
            let chol = Cholesky::new(cov).expect("noised covariance of a PD covariance is PD");
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            NoisedComponent { mean: &c.mean * alpha_bar.sqrt(), chol, log_scale: c.weight.ln() - 0.5 * log_det }
        })
        .collect()
}

/// `-sqrt(1 - abar) * score` over the active components, responsibilities by
/// log-sum-exp.
fn mixture_epsilon(comps: &[NoisedComponent], active: &[usize], x: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    let mut log_r = Vec::with_capacity(active.len());
    let mut prec_dev = Vec::with_capacity(active.len());
    for &k in active {
        let c = &comps[k];
        let l = c.chol.l_dirty();
        let y = l.solve_lower_triangular(&(x - &c.mean)).expect("triangular factor is nonsingular");
        log_r.push(c.log_scale - 0.5 * y.norm_squared());
        prec_dev.push(l.tr_solve_lower_triangular(&y).expect("triangular factor is nonsingular"));
    }
    let m = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_r.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut acc = DVector::zeros(x.len());
    for (wk, u) in weights.iter().zip(&prec_dev) {
        acc.axpy(wk / z, u, 1.0);
    }
    acc * (1.0 - alpha_bar).sqrt()
}

fn check_inputs(w: &GmmWorld, s: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<()> {
    if t == 0 || t > s.steps() {
        return Err(Error::StepOutOfRange { t, steps: s.steps() });
    }
    if x.len() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), got: x.len() });
    }
    Ok(())
}

/// Exact noise prediction of the (conditioned) mixture at step `t`.
pub fn analytic_epsilon(
    w: &GmmWorld,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    c: &Condition,
) -> Result<DenoiserOutput> {
    check_inputs(w, s, x, t)?;
    let active = w.active_components(c)?;
    let a = s.alpha_bar(t);
    let comps = noised_components(w, a);
    Ok(DenoiserOutput::from_epsilon(x, mixture_epsilon(&comps, &active, x, a), a))
}

/// Adapter-style identity mixing in noise space:
/// `(1 - lambda) * eps(no identity) + lambda * eps(c)`.
pub fn adapter_epsilon(
    w: &GmmWorld,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    c: &Condition,
    lambda_ipa: f64,
) -> Result<DenoiserOutput> {
    AnalyticDenoiser::for_step(w, s, t)?.adapter(x, t, c, lambda_ipa)
}

fn check_lambda_ipa(lambda_ipa: f64) -> Result<()> {
    if lambda_ipa >= 0.0 && lambda_ipa.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: "lambda_ipa", reason: format!("must be >= 0, got {lambda_ipa}") })
    }
}

/// Denoiser with the noised mixture factored once per step.
///
/// Produces results bit-identical to [`analytic_epsilon`]; the sampling loops
/// use it to avoid refactoring covariances at every call.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser<'a> {
    world: &'a GmmWorld,
    schedule: &'a NoiseSchedule,
    /// Index `t - 1`; `None` for steps not prepared.
    steps: Vec<Option<Vec<NoisedComponent>>>,
}

impl<'a> AnalyticDenoiser<'a> {
    pub fn new(world: &'a GmmWorld, schedule: &'a NoiseSchedule) -> Self {
        let steps = (1..=schedule.steps()).map(|t| Some(noised_components(world, schedule.alpha_bar(t)))).collect();
        Self { world, schedule, steps }
    }

    fn for_step(world: &'a GmmWorld, schedule: &'a NoiseSchedule, t: usize) -> Result<Self> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::StepOutOfRange { t, steps: schedule.steps() });
        }
        let mut steps = vec![None; schedule.steps()];
        steps[t - 1] = Some(noised_components(world, schedule.alpha_bar(t)));
        Ok(Self { world, schedule, steps })
    }

    pub fn world(&self) -> &'a GmmWorld {
        self.world
    }

    pub fn schedule(&self) -> &'a NoiseSchedule {
        self.schedule
    }

    pub fn epsilon(&self, x: &DVector<f64>, t: usize, c: &Condition) -> Result<DenoiserOutput> {
        check_inputs(self.world, self.schedule, x, t)?;
        let active = self.world.active_components(c)?;
        let a = self.schedule.alpha_bar(t);
        let comps = self.steps[t - 1].as_ref().expect("step prepared");
        Ok(DenoiserOutput::from_epsilon(x, mixture_epsilon(comps, &active, x, a), a))
    }

    /// Returns `(adapter output, identity-free output)`.
    pub fn adapter_with_base(
        &self,
        x: &DVector<f64>,
        t: usize,
        c: &Condition,
        lambda_ipa: f64,
    ) -> Result<(DenoiserOutput, DenoiserOutput)> {
        check_lambda_ipa(lambda_ipa)?;
        let base = self.epsilon(x, t, &c.without_identity())?;
        if c.identity.is_none() {
            return Ok((base.clone(), base));
        }
        let cond = self.epsilon(x, t, c)?;
        let eps = &base.eps_hat * (1.0 - lambda_ipa) + &cond.eps_hat * lambda_ipa;
        Ok((DenoiserOutput::from_epsilon(x, eps, self.schedule.alpha_bar(t)), base))
    }

    pub fn adapter(&self, x: &DVector<f64>, t: usize, c: &Condition, lambda_ipa: f64) -> Result<DenoiserOutput> {
        self.adapter_with_base(x, t, c, lambda_ipa).map(|(out, _)| out)
    }
}
